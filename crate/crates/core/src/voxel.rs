//! Point clouds, range clipping and the sort-based point→voxel index.
//!
//! A [`VoxelMap`] groups the unmasked points of a cloud by the cell
//! `(⌊x/s⌋, ⌊y/s⌋, ⌊z/s⌋)`. Voxels are listed in lexicographic coordinate
//! order and the points inside each voxel are ordered by their coordinates
//! and features (point index only breaks exact duplicates). Both orders
//! depend only on the point set, so any reduction that walks a map
//! accumulates in the same order for every permutation of the input.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Voxel id stored for masked points.
pub const MASKED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelCoord {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }

    /// Cell of `c` at scale `s`.
    pub fn of_point(c: [f64; 3], s: f64) -> Result<Self> {
        let cell = |v: f64| {
            let q = (v / s).floor();
            if q < i32::MIN as f64 || q > i32::MAX as f64 {
                Err(Error::Argument(format!(
                    "coordinate {v} does not fit a voxel index at scale {s}"
                )))
            } else {
                Ok(q as i32)
            }
        };
        Ok(Self::new(cell(c[0])?, cell(c[1])?, cell(c[2])?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    /// `N x D` extra per-point attributes (intensity, ...).
    feats: Tensor,
    labels: Option<Vec<u32>>,
    valid: Vec<bool>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, feats: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        let n = coords.len();
        if feats.rows() != n {
            return Err(Error::Data(format!(
                "{} feature rows for {n} points",
                feats.rows()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Data(format!("label count differs from {n} points")));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if !feats.is_finite() {
            return Err(Error::Data("non-finite point feature".into()));
        }
        Ok(Self {
            coords,
            feats,
            labels,
            valid: vec![true; n],
        })
    }

    /// A cloud with no extra attributes.
    pub fn from_coords(coords: Vec<[f64; 3]>) -> Result<Self> {
        let n = coords.len();
        Self::new(coords, Tensor::zeros(n, 0), None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> &Tensor {
        &self.feats
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.cols()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<u32>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Data(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub(crate) fn coords_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.coords
    }

    /// Checks every label is a class id below `num_classes` or `ignore`.
    pub fn check_labels(&self, num_classes: usize, ignore: u32) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some((i, &l)) = labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l != ignore && l as usize >= num_classes)
            {
                return Err(Error::Data(format!(
                    "point {i} has label {l}, expected < {num_classes} or {ignore}"
                )));
            }
        }
        Ok(())
    }

    /// Row `i` of the full point descriptor: coordinates followed by attributes.
    pub fn point_row(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.coords[i]
            .iter()
            .copied()
            .chain(self.feats.row(i).iter().copied())
    }

    /// Copy with points reordered so that new point `k` is old point `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            feats: self.feats.select_rows(order),
            labels: self
                .labels
                .as_ref()
                .map(|l| order.iter().map(|&i| l[i]).collect()),
            valid: order.iter().map(|&i| self.valid[i]).collect(),
        }
    }

    /// Masks points outside the half-open box `[min, max)`; their labels
    /// become `ignore`.
    pub fn clip_range(mut self, min: [f64; 3], max: [f64; 3], ignore: u32) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::Argument(format!(
                "clip range min {min:?} must be below max {max:?}"
            )));
        }
        for (i, c) in self.coords.iter().enumerate() {
            let inside = (0..3).all(|a| c[a] >= min[a] && c[a] < max[a]);
            if !inside {
                self.valid[i] = false;
                if let Some(l) = self.labels.as_mut() {
                    l[i] = ignore;
                }
            }
        }
        Ok(self)
    }

    fn canonical_cmp(&self, a: usize, b: usize) -> Ordering {
        let (ca, cb) = (&self.coords[a], &self.coords[b]);
        ca.iter()
            .zip(cb)
            .map(|(x, y)| x.total_cmp(y))
            .chain(
                self.feats
                    .row(a)
                    .iter()
                    .zip(self.feats.row(b))
                    .map(|(x, y)| x.total_cmp(y)),
            )
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.cmp(&b))
    }
}

/// Point→voxel grouping of one cloud at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    scale: f64,
    point_to_voxel: Vec<u32>,
    voxel_coords: Arc<Vec<VoxelCoord>>,
    offsets: Vec<usize>,
    members: Vec<u32>,
}

impl VoxelMap {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn n_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_coords.len()
    }

    /// Number of unmasked points covered by the map.
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn voxel_coords(&self) -> &Arc<Vec<VoxelCoord>> {
        &self.voxel_coords
    }

    pub fn point_to_voxel(&self) -> &[u32] {
        &self.point_to_voxel
    }

    /// Voxel of point `i`, `None` when masked.
    #[inline]
    pub fn voxel_of(&self, i: usize) -> Option<usize> {
        match self.point_to_voxel[i] {
            MASKED => None,
            v => Some(v as usize),
        }
    }

    /// CSR offsets: voxel `v` owns `members[offsets[v]..offsets[v + 1]]`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Points of voxel `v` in canonical order.
    #[inline]
    pub fn group(&self, v: usize) -> &[u32] {
        &self.members[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn group_size(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Builds the voxel index of `pc` at scale `s` by sorting cell keys.
pub fn voxelize(pc: &PointCloud, s: f64) -> Result<VoxelMap> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Argument(format!(
            "voxel scale must be positive, got {s}"
        )));
    }
    let n = pc.len();
    let mut keys = vec![VoxelCoord::new(0, 0, 0); n];
    let mut order = Vec::with_capacity(n);
    for i in 0..n {
        if pc.is_valid(i) {
            keys[i] = VoxelCoord::of_point(pc.coords[i], s)?;
            order.push(i);
        }
    }
    order.sort_unstable_by(|&a, &b| keys[a].cmp(&keys[b]).then_with(|| pc.canonical_cmp(a, b)));

    let mut point_to_voxel = vec![MASKED; n];
    let mut voxel_coords = Vec::new();
    let mut offsets = vec![0];
    let mut members = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if k > 0 && keys[i] != keys[order[k - 1]] {
            offsets.push(k);
        }
        if k == 0 || keys[i] != keys[order[k - 1]] {
            voxel_coords.push(keys[i]);
        }
        point_to_voxel[i] = (voxel_coords.len() - 1) as u32;
        members.push(i as u32);
    }
    offsets.push(order.len());
    if order.is_empty() {
        offsets.truncate(1);
    }
    Ok(VoxelMap {
        scale: s,
        point_to_voxel,
        voxel_coords: Arc::new(voxel_coords),
        offsets,
        members,
    })
}

/// `c − s·v` per point; zero rows for masked points.
pub fn voxel_center_offset(pc: &PointCloud, vm: &VoxelMap) -> Result<Tensor> {
    if vm.n_points() != pc.len() {
        return Err(Error::Contract(format!(
            "voxel map covers {} points, cloud has {}",
            vm.n_points(),
            pc.len()
        )));
    }
    let s = vm.scale;
    let mut out = Tensor::zeros(pc.len(), 3);
    for (i, c) in pc.coords.iter().enumerate() {
        if let Some(v) = vm.voxel_of(i) {
            let cell = vm.voxel_coords[v];
            let row = out.row_mut(i);
            row[0] = c[0] - s * cell.ix as f64;
            row[1] = c[1] - s * cell.iy as f64;
            row[2] = c[2] - s * cell.iz as f64;
        }
    }
    Ok(out)
}

/// Voxel maps of one cloud for every scale it will be viewed at.
#[derive(Debug, Clone, Default)]
pub struct VoxelPyramid {
    maps: BTreeMap<u64, Arc<VoxelMap>>,
}

impl VoxelPyramid {
    pub fn build<'a>(pc: &PointCloud, scales: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for &s in scales {
            if let std::collections::btree_map::Entry::Vacant(e) = maps.entry(s.to_bits()) {
                e.insert(Arc::new(voxelize(pc, s)?));
            }
        }
        Ok(Self { maps })
    }

    pub fn get(&self, scale: f64) -> Result<&Arc<VoxelMap>> {
        self.maps
            .get(&scale.to_bits())
            .ok_or_else(|| Error::Contract(format!("no voxel map built for scale {scale}")))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const KITTI_MIN: [f64; 3] = [-48.0, -48.0, -3.0];
    const KITTI_MAX: [f64; 3] = [48.0, 48.0, 1.8];

    fn random_cloud(n: usize, extent: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..extent)))
            .collect();
        PointCloud::from_coords(coords).unwrap()
    }

    #[test]
    fn floor_rule() {
        let pc = PointCloud::from_coords(vec![[1.0, 2.5, -0.3]]).unwrap();
        let vm = voxelize(&pc, 0.5).unwrap();
        assert_eq!(vm.voxel_coords()[0], VoxelCoord::new(2, 5, -1));
        let off = voxel_center_offset(&pc, &vm).unwrap();
        assert_eq!(off.row(0)[0], 0.0);
        assert_eq!(off.row(0)[1], 0.0);
        assert!((off.row(0)[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn shared_voxel() {
        let pc = PointCloud::from_coords(vec![[0.1, 0.1, 0.1], [0.3, 0.2, 0.0]]).unwrap();
        let vm = voxelize(&pc, 0.4).unwrap();
        assert_eq!(vm.n_voxels(), 1);
        assert_eq!(vm.voxel_coords()[0], VoxelCoord::new(0, 0, 0));
        assert_eq!(vm.group_sizes(), vec![2]);
    }

    #[test]
    fn corner_point_has_zero_offset() {
        let pc = PointCloud::from_coords(vec![[0.8, -1.2, 2.0]]).unwrap();
        let vm = voxelize(&pc, 0.4).unwrap();
        let off = voxel_center_offset(&pc, &vm).unwrap();
        assert!(off.data().iter().all(|v| v.abs() < 1e-15), "{off:?}");
    }

    #[test]
    fn bad_scale_rejected() {
        let pc = random_cloud(3, 1.0, 0);
        assert!(matches!(voxelize(&pc, 0.0), Err(Error::Argument(_))));
        assert!(matches!(voxelize(&pc, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn voxel_count_matches_distinct_keys() {
        let pc = random_cloud(1000, 10.0, 7);
        let vm = voxelize(&pc, 0.4).unwrap();
        let keys: BTreeSet<_> = pc
            .coords()
            .iter()
            .map(|c| c.map(|v| (v / 0.4).floor() as i64))
            .collect();
        assert_eq!(vm.n_voxels(), keys.len());
        assert_eq!(vm.n_members(), 1000);
    }

    #[test]
    fn kitti_range_clipping() {
        let pc = PointCloud::new(
            vec![
                [0.0, 0.0, 0.0],
                [49.0, 0.0, 0.0],
                [0.0, 0.0, 1.8],
                [-48.0, -48.0, -3.0],
            ],
            Tensor::zeros(4, 0),
            Some(vec![1, 2, 3, 4]),
        )
        .unwrap();
        let clipped = pc.clip_range(KITTI_MIN, KITTI_MAX, 255).unwrap();
        assert_eq!(clipped.valid_mask(), &[true, false, false, true]);
        assert_eq!(clipped.labels().unwrap(), &[1, 255, 255, 4]);
        let vm = voxelize(&clipped, 0.4).unwrap();
        assert_eq!(vm.point_to_voxel()[1], MASKED);
        assert_eq!(vm.n_members(), 2);
        let off = voxel_center_offset(&clipped, &vm).unwrap();
        assert_eq!(off.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn infinite_box_keeps_everything() {
        let pc = random_cloud(50, 100.0, 1);
        let inf = f64::INFINITY;
        let clipped = pc.clone().clip_range([-inf; 3], [inf; 3], 0).unwrap();
        assert_eq!(clipped.valid_mask(), pc.valid_mask());
        assert!(pc.clip_range([1.0; 3], [1.0; 3], 0).is_err());
    }

    #[test]
    fn all_masked_gives_empty_map() {
        let pc = random_cloud(10, 1.0, 2)
            .clip_range([5.0; 3], [6.0; 3], 0)
            .unwrap();
        let vm = voxelize(&pc, 0.5).unwrap();
        assert_eq!(vm.n_voxels(), 0);
        assert_eq!(vm.offsets(), &[0]);
    }

    #[test]
    fn coarser_scale_nests_finer_cells() {
        let pc = random_cloud(500, 8.0, 11);
        let fine = voxelize(&pc, 0.4).unwrap();
        let coarse = voxelize(&pc, 0.8).unwrap();
        for i in 0..pc.len() {
            let f = fine.voxel_coords()[fine.voxel_of(i).unwrap()];
            let c = coarse.voxel_coords()[coarse.voxel_of(i).unwrap()];
            let direct = pc.coords()[i].map(|v| (v / 0.8).floor() as i32);
            assert_eq!([c.ix, c.iy, c.iz], direct);
            assert_eq!(
                direct,
                [f.ix.div_euclid(2), f.iy.div_euclid(2), f.iz.div_euclid(2)]
            );
        }
        for a in 0..pc.len() {
            for b in (a + 1)..pc.len() {
                if fine.voxel_of(a) == fine.voxel_of(b) {
                    assert_eq!(coarse.voxel_of(a), coarse.voxel_of(b));
                }
            }
        }
    }

    #[test]
    fn pyramid_dedups_scales() {
        let pc = random_cloud(20, 2.0, 3);
        let p = VoxelPyramid::build(&pc, &[0.4, 0.8, 0.4, 1.6]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.get(0.8).is_ok());
        assert!(p.get(3.2).is_err());
    }

    proptest! {
        #[test]
        fn map_invariants(seed in 0u64..1000, n in 1usize..200, s in 0.05f64..2.0) {
            let pc = random_cloud(n, 5.0, seed);
            let vm = voxelize(&pc, s).unwrap();
            prop_assert!(vm.voxel_coords().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(vm.group_sizes().iter().all(|&g| g > 0));
            prop_assert_eq!(vm.group_sizes().iter().sum::<usize>(), n);
            for v in 0..vm.n_voxels() {
                for &p in vm.group(v) {
                    prop_assert_eq!(vm.voxel_of(p as usize), Some(v));
                }
            }
            let off = voxel_center_offset(&pc, &vm).unwrap();
            prop_assert!(off.data().iter().all(|&o| (0.0..s).contains(&o)));
        }

        #[test]
        fn permutation_only_relabels_points(seed in 0u64..1000, n in 2usize..150) {
            let pc = random_cloud(n, 3.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let a = voxelize(&pc, 0.5).unwrap();
            let b = voxelize(&pc.permuted(&order), 0.5).unwrap();
            prop_assert_eq!(a.voxel_coords(), b.voxel_coords());
            prop_assert_eq!(a.group_sizes(), b.group_sizes());
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(a.voxel_of(i), b.voxel_of(k));
            }
            for v in 0..a.n_voxels() {
                let ga: Vec<usize> = a.group(v).iter().map(|&p| p as usize).collect();
                let gb: Vec<usize> = b.group(v).iter().map(|&p| order[p as usize]).collect();
                prop_assert_eq!(ga, gb);
            }
        }
    }
}
