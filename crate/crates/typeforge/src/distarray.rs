//! Block-distributed N-dimensional arrays over the fabric.
//!
//! An array is split per dimension into contiguous blocks (balanced split,
//! remainder cells to the lower-indexed blocks), blocks are enumerated
//! lexicographically with the first dimension outermost, and block `b` is
//! owned by process `b mod P`. Reads route local → halo cache → one-sided;
//! halo exchange supports a blocking discipline plus two asynchronous ones
//! (whole-face versioned adoption and element-granular racy adoption).

use crate::fabric::{BlockId, BlockStore, Fabric, FaceKey, Pid};
use crate::typesys::{CommMode, ElemKind, Mutability, ResolvedAttributes};
use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DistError {
    #[error("invalid distribution for `{name}`: {reason}")]
    SpecError { name: String, reason: String },
    #[error("index {idx:?} out of bounds for `{name}`")]
    OutOfBounds { name: String, idx: Vec<i64> },
    #[error("process {pid} owns {count} blocks of `{name}`; bounds need exactly one")]
    NoBlockOwned { name: String, pid: Pid, count: usize },
    #[error("`{name}` is read-only")]
    ReadOnly { name: String },
    #[error("`{name}` has no halo region")]
    NoHalo { name: String },
    #[error("incompatible array specifications: `{dst}` vs `{src}`")]
    SpecMismatch { dst: String, src: String },
    #[error(transparent)]
    Fabric(#[from] crate::fabric::FabricError),
}

/// Distribution recipe for one array.
#[derive(Debug, Clone, PartialEq)]
pub struct DistSpec {
    pub elem: ElemKind,
    pub shape: Vec<i64>,
    pub blocks: Vec<i64>,
    pub halo_depth: i64,
    pub comm: CommMode,
    pub readonly: bool,
}

impl DistSpec {
    pub fn from_attrs(name: &str, attrs: &ResolvedAttributes) -> Result<DistSpec, DistError> {
        let err = |reason: String| DistError::SpecError {
            name: name.to_string(),
            reason,
        };
        let blocks = attrs
            .partition
            .clone()
            .ok_or_else(|| err("array has no block partition".into()))?;
        if blocks.len() != attrs.shape.len() {
            return Err(err(format!(
                "partition has {} dimensions, array has {}",
                blocks.len(),
                attrs.shape.len()
            )));
        }
        let spec = DistSpec {
            elem: attrs.element,
            shape: attrs.shape.clone(),
            blocks,
            halo_depth: attrs.halo_depth,
            comm: attrs.comm_mode,
            readonly: attrs.mutability == Mutability::ReadOnly,
        };
        spec.validate(name)?;
        Ok(spec)
    }

    pub fn validate(&self, name: &str) -> Result<(), DistError> {
        let err = |reason: String| DistError::SpecError {
            name: name.to_string(),
            reason,
        };
        if self.shape.is_empty() {
            return Err(err("array needs at least one dimension".into()));
        }
        for d in 0..self.shape.len() {
            if self.blocks[d] < 1 {
                return Err(err(format!("dimension {d} has {} blocks", self.blocks[d])));
            }
            if self.shape[d] < self.blocks[d] {
                return Err(err(format!(
                    "dimension {d} has extent {} but {} blocks",
                    self.shape[d], self.blocks[d]
                )));
            }
            if self.halo_depth > 0 {
                let min_span = self.shape[d] / self.blocks[d];
                if self.halo_depth > min_span {
                    return Err(err(format!(
                        "halo depth {} exceeds the smallest block span in dimension {d}",
                        self.halo_depth
                    )));
                }
            }
        }
        Ok(())
    }

    fn compatible(&self, other: &DistSpec) -> bool {
        self.elem == other.elem && self.shape == other.shape && self.blocks == other.blocks
    }
}

/// Balanced split of `extent` cells into `blocks` contiguous ranges;
/// remainder cells go to the lower-indexed blocks.
pub fn split_dim(extent: i64, blocks: i64) -> Vec<(i64, i64)> {
    let base = extent / blocks;
    let rem = extent % blocks;
    let mut out = Vec::with_capacity(blocks as usize);
    let mut lo = 0;
    for b in 0..blocks {
        let size = base + i64::from(b < rem);
        out.push((lo, lo + size));
        lo += size;
    }
    out
}

#[derive(Debug, Clone)]
pub struct BlockGeom {
    pub id: usize,
    pub coords: Vec<i64>,
    /// Global start per dimension, inclusive.
    pub lo: Vec<i64>,
    /// Global end per dimension, exclusive.
    pub hi: Vec<i64>,
    pub owner: Pid,
}

impl BlockGeom {
    pub fn span(&self, d: usize) -> i64 {
        self.hi[d] - self.lo[d]
    }

    pub fn volume(&self) -> i64 {
        (0..self.lo.len()).map(|d| self.span(d)).product()
    }

    pub fn contains(&self, idx: &[i64]) -> bool {
        idx.iter()
            .enumerate()
            .all(|(d, &x)| self.lo[d] <= x && x < self.hi[d])
    }
}

/// Row-major linear offset of a global index inside a block.
fn linear_index(geom: &BlockGeom, idx: &[i64]) -> usize {
    let mut lin = 0;
    for d in 0..idx.len() {
        lin = lin * geom.span(d) + (idx[d] - geom.lo[d]);
    }
    lin as usize
}

/// Advances `idx` row-major across the block, skipping dimension `skip`.
fn advance_cross(idx: &mut [i64], geom: &BlockGeom, skip: usize) -> bool {
    for d in (0..idx.len()).rev() {
        if d == skip {
            continue;
        }
        idx[d] += 1;
        if idx[d] < geom.hi[d] {
            return true;
        }
        idx[d] = geom.lo[d];
    }
    false
}

/// Per-process adopted halo data: face key → (version, payload).
#[derive(Debug, Default)]
struct ProcHalo {
    faces: HashMap<FaceKey, (i64, Vec<u64>)>,
    exchanges: i64,
}

pub struct DistArray {
    pub id: u32,
    pub name: String,
    pub spec: DistSpec,
    geoms: Vec<BlockGeom>,
    stores: Vec<Arc<BlockStore>>,
    block_ids: Vec<BlockId>,
    owned: Vec<Vec<usize>>,
    halos: Vec<Mutex<ProcHalo>>,
}

impl DistArray {
    /// Registers every block (zero-filled) and halo face with the fabric.
    pub fn new(
        fab: &mut Fabric,
        id: u32,
        name: &str,
        spec: DistSpec,
    ) -> Result<DistArray, DistError> {
        spec.validate(name)?;
        let procs = fab.procs();
        let dims = spec.shape.len();
        let spans: Vec<Vec<(i64, i64)>> = (0..dims)
            .map(|d| split_dim(spec.shape[d], spec.blocks[d]))
            .collect();
        let total: i64 = spec.blocks.iter().product();

        let mut geoms = Vec::with_capacity(total as usize);
        for bid in 0..total {
            let mut rest = bid;
            let mut coords = vec![0; dims];
            for d in (0..dims).rev() {
                coords[d] = rest % spec.blocks[d];
                rest /= spec.blocks[d];
            }
            let (lo, hi): (Vec<i64>, Vec<i64>) = (0..dims)
                .map(|d| spans[d][coords[d] as usize])
                .unzip();
            geoms.push(BlockGeom {
                id: bid as usize,
                coords,
                lo,
                hi,
                owner: (bid as usize) % procs,
            });
        }

        let mut owned = vec![Vec::new(); procs];
        let mut stores = Vec::with_capacity(geoms.len());
        let mut block_ids = Vec::with_capacity(geoms.len());
        for g in &geoms {
            owned[g.owner].push(g.id);
            let bid = fab.register_block(g.owner, g.volume() as usize, spec.elem, name)?;
            stores.push(fab.block(bid));
            block_ids.push(bid);
        }

        let arr = DistArray {
            id,
            name: name.to_string(),
            spec,
            geoms,
            stores,
            block_ids,
            owned,
            halos: (0..procs).map(|_| Mutex::new(ProcHalo::default())).collect(),
        };

        if arr.spec.halo_depth > 0 {
            let racy = arr.spec.comm == CommMode::HaloAsyncRacy;
            let h = arr.spec.halo_depth;
            for b in 0..arr.geoms.len() {
                for (key, n) in arr.published_faces(b) {
                    let from = arr.geoms[b].owner;
                    let to = arr.geoms[n].owner;
                    let geom = &arr.geoms[b];
                    let cross: i64 = (0..dims)
                        .filter(|&d| d != key.axis as usize)
                        .map(|d| geom.span(d))
                        .product();
                    let len = (h * cross) as usize;
                    let tag = format!(
                        "face:{}:{}:{}{}",
                        name,
                        b,
                        (b'x' + key.axis) as char,
                        key.dir()
                    );
                    fab.register_face(key, from, to, len, arr.spec.elem.byte_size(), &tag, racy)?;
                }
            }
        }
        Ok(arr)
    }

    pub fn geoms(&self) -> &[BlockGeom] {
        &self.geoms
    }

    pub fn owned_blocks(&self, pid: Pid) -> &[usize] {
        &self.owned[pid]
    }

    pub fn store(&self, block: usize) -> &Arc<BlockStore> {
        &self.stores[block]
    }

    /// Raw bits of every cell in global row-major order, read directly from
    /// the owning blocks. Meant for post-run inspection, not for use while
    /// contexts are still exchanging.
    pub fn snapshot(&self) -> Vec<u64> {
        let total: i64 = self.spec.shape.iter().product();
        let mut out = Vec::with_capacity(total as usize);
        let mut idx = vec![0i64; self.spec.shape.len()];
        loop {
            let b = self.block_of(&idx).expect("index inside shape");
            out.push(self.stores[b].load(linear_index(&self.geoms[b], &idx)));
            let mut d = idx.len();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < self.spec.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    fn dim_block(&self, d: usize, x: i64) -> Option<i64> {
        if x < 0 || x >= self.spec.shape[d] {
            return None;
        }
        let base = self.spec.shape[d] / self.spec.blocks[d];
        let rem = self.spec.shape[d] % self.spec.blocks[d];
        let cut = rem * (base + 1);
        Some(if x < cut {
            x / (base + 1)
        } else {
            rem + (x - cut) / base
        })
    }

    pub fn block_of(&self, idx: &[i64]) -> Result<usize, DistError> {
        let oob = || DistError::OutOfBounds {
            name: self.name.clone(),
            idx: idx.to_vec(),
        };
        if idx.len() != self.spec.shape.len() {
            return Err(oob());
        }
        let mut id = 0;
        for d in 0..idx.len() {
            let b = self.dim_block(d, idx[d]).ok_or_else(oob)?;
            id = id * self.spec.blocks[d] + b;
        }
        Ok(id as usize)
    }

    pub fn owner_of(&self, idx: &[i64]) -> Result<Pid, DistError> {
        Ok(self.geoms[self.block_of(idx)?].owner)
    }

    /// Neighbor block id across `axis` in one direction, if inside the grid.
    fn neighbor_of(&self, block: usize, axis: usize, positive: bool) -> Option<usize> {
        let g = &self.geoms[block];
        let c = g.coords[axis] + if positive { 1 } else { -1 };
        if c < 0 || c >= self.spec.blocks[axis] {
            return None;
        }
        let mut id = 0;
        for d in 0..g.coords.len() {
            let cd = if d == axis { c } else { g.coords[d] };
            id = id * self.spec.blocks[d] + cd;
        }
        Some(id as usize)
    }

    /// Faces this block sends: key plus the receiving block.
    fn published_faces(&self, block: usize) -> Vec<(FaceKey, usize)> {
        let mut out = Vec::new();
        if self.spec.halo_depth == 0 {
            return out;
        }
        for axis in 0..self.spec.shape.len() {
            for positive in [false, true] {
                if let Some(n) = self.neighbor_of(block, axis, positive) {
                    out.push((
                        FaceKey {
                            array: self.id,
                            block: block as u32,
                            axis: axis as u8,
                            positive,
                        },
                        n,
                    ));
                }
            }
        }
        out
    }

    /// Faces this block consumes: the publishing neighbor's key.
    fn consumed_faces(&self, block: usize) -> Vec<(FaceKey, usize)> {
        let mut out = Vec::new();
        if self.spec.halo_depth == 0 {
            return out;
        }
        for axis in 0..self.spec.shape.len() {
            for positive in [false, true] {
                if let Some(n) = self.neighbor_of(block, axis, positive) {
                    // Our high-side halo holds the low-side face of the
                    // higher neighbor, and vice versa.
                    out.push((
                        FaceKey {
                            array: self.id,
                            block: n as u32,
                            axis: axis as u8,
                            positive: !positive,
                        },
                        n,
                    ));
                }
            }
        }
        out
    }

    /// Gathers a face payload straight from a block store: `h` planes from
    /// the low or high edge, planes outermost, then row-major cross order.
    fn gather_face(&self, block: usize, axis: usize, positive: bool) -> Vec<u64> {
        let g = &self.geoms[block];
        let store = &self.stores[block];
        let h = self.spec.halo_depth;
        let (p0, p1) = if positive {
            (g.hi[axis] - h, g.hi[axis])
        } else {
            (g.lo[axis], g.lo[axis] + h)
        };
        let mut out = Vec::new();
        let mut idx = g.lo.clone();
        for plane in p0..p1 {
            idx.copy_from_slice(&g.lo);
            idx[axis] = plane;
            loop {
                out.push(store.load(linear_index(g, &idx)));
                if !advance_cross(&mut idx, g, axis) {
                    break;
                }
            }
        }
        out
    }

    /// Offset of a halo cell inside the face published by block `n`.
    fn face_offset(&self, n: usize, axis: usize, publisher_positive: bool, idx: &[i64]) -> usize {
        let g = &self.geoms[n];
        let h = self.spec.halo_depth;
        let q = if publisher_positive {
            idx[axis] - (g.hi[axis] - h)
        } else {
            idx[axis] - g.lo[axis]
        };
        let mut cross = 0;
        let mut cross_size = 1;
        for d in 0..idx.len() {
            if d == axis {
                continue;
            }
            cross = cross * g.span(d) + (idx[d] - g.lo[d]);
            cross_size *= g.span(d);
        }
        (q * cross_size + cross) as usize
    }

    /// Serves a read from the adopted halo region when the index falls in
    /// the face shell of one of the caller's blocks. `None` means miss.
    fn halo_lookup(&self, pid: Pid, idx: &[i64]) -> Option<u64> {
        if self.spec.halo_depth == 0 {
            return None;
        }
        let h = self.spec.halo_depth;
        for &b in &self.owned[pid] {
            let g = &self.geoms[b];
            let mut off_axis = None;
            for d in 0..idx.len() {
                let x = idx[d];
                if g.lo[d] <= x && x < g.hi[d] {
                    continue;
                }
                let low_side = g.lo[d] - h <= x && x < g.lo[d];
                let high_side = g.hi[d] <= x && x < g.hi[d] + h;
                if !(low_side || high_side) || off_axis.is_some() {
                    off_axis = None;
                    break;
                }
                off_axis = Some((d, high_side));
            }
            let Some((axis, toward_high)) = off_axis else {
                continue;
            };
            let n = self.neighbor_of(b, axis, toward_high)?;
            let key = FaceKey {
                array: self.id,
                block: n as u32,
                axis: axis as u8,
                positive: !toward_high,
            };
            let halo = self.halos[pid].lock().unwrap();
            if let Some((_, data)) = halo.faces.get(&key) {
                return Some(data[self.face_offset(n, axis, !toward_high, idx)]);
            }
        }
        None
    }

    pub fn read(&self, fab: &Fabric, pid: Pid, idx: &[i64]) -> Result<u64, DistError> {
        let b = self.block_of(idx)?;
        let g = &self.geoms[b];
        if g.owner == pid {
            return Ok(self.stores[b].load(linear_index(g, idx)));
        }
        if let Some(bits) = self.halo_lookup(pid, idx) {
            return Ok(bits);
        }
        Ok(fab.one_sided_get_block(pid, self.block_ids[b], linear_index(g, idx))?)
    }

    pub fn write(&self, fab: &Fabric, pid: Pid, idx: &[i64], bits: u64) -> Result<(), DistError> {
        if self.spec.readonly {
            return Err(DistError::ReadOnly {
                name: self.name.clone(),
            });
        }
        let b = self.block_of(idx)?;
        let g = &self.geoms[b];
        if g.owner == pid {
            self.stores[b].store(linear_index(g, idx), bits);
            return Ok(());
        }
        fab.one_sided_put_block(pid, self.block_ids[b], linear_index(g, idx), bits)?;
        Ok(())
    }

    pub fn local_bounds(&self, pid: Pid, dim: usize) -> Result<(i64, i64), DistError> {
        let blocks = &self.owned[pid];
        if blocks.len() != 1 {
            return Err(DistError::NoBlockOwned {
                name: self.name.clone(),
                pid,
                count: blocks.len(),
            });
        }
        let g = &self.geoms[blocks[0]];
        let mut lo = g.lo[dim];
        let mut hi = g.hi[dim];
        if lo == 0 {
            lo += 1;
        }
        if hi == self.spec.shape[dim] {
            hi -= 1;
        }
        Ok((lo, hi))
    }

    /// Message-free halo warm-up: caches every consumed face at version 0
    /// by reading the neighbor blocks directly, before any iteration runs.
    pub fn setup_halo_refresh(&self, fab: &Fabric, pid: Pid) -> Result<(), DistError> {
        if self.spec.halo_depth == 0 {
            return Ok(());
        }
        let mut adopted = Vec::new();
        for &b in &self.owned[pid] {
            for (key, n) in self.consumed_faces(b) {
                let data = self.gather_face(n, key.axis as usize, key.positive);
                for (i, &bits) in data.iter().enumerate() {
                    fab.tags_record(key, i, bits);
                }
                adopted.push((key, data));
            }
        }
        let mut halo = self.halos[pid].lock().unwrap();
        for (key, data) in adopted {
            halo.faces.insert(key, (0, data));
        }
        Ok(())
    }

    /// One halo exchange under the array's communication discipline.
    pub fn halo_exchange(&self, fab: &Fabric, pid: Pid) -> Result<(), DistError> {
        match self.spec.comm {
            CommMode::HaloSync => self.exchange_sync(fab, pid),
            CommMode::HaloAsyncSafe => self.exchange_async(fab, pid),
            CommMode::HaloAsyncRacy => {
                if fab.is_deterministic() {
                    // Serialized scheduling makes racy adoption equivalent
                    // to whole-face adoption.
                    self.exchange_async(fab, pid)
                } else {
                    self.exchange_racy(fab, pid)
                }
            }
            _ => Err(DistError::NoHalo {
                name: self.name.clone(),
            }),
        }
    }

    fn next_exchange(&self, pid: Pid) -> i64 {
        let mut halo = self.halos[pid].lock().unwrap();
        halo.exchanges += 1;
        halo.exchanges
    }

    fn publish_all(&self, fab: &Fabric, pid: Pid, iteration: i64) -> Result<(), DistError> {
        for &b in &self.owned[pid] {
            for (key, _) in self.published_faces(b) {
                let data = self.gather_face(b, key.axis as usize, key.positive);
                for (i, &bits) in data.iter().enumerate() {
                    fab.tags_record(key, i, bits);
                }
                fab.publish_face(pid, key, &data, iteration)?;
            }
        }
        Ok(())
    }

    /// Blocking discipline: publish, adopt exactly this iteration's faces,
    /// then a trailing barrier so nobody overwrites an unread face.
    fn exchange_sync(&self, fab: &Fabric, pid: Pid) -> Result<(), DistError> {
        let iteration = self.next_exchange(pid);
        self.publish_all(fab, pid, iteration)?;
        for &b in &self.owned[pid] {
            for (key, _) in self.consumed_faces(b) {
                let data = fab.adopt_face_wait(pid, key, iteration)?;
                for (i, &bits) in data.iter().enumerate() {
                    fab.tags_check(key, i, bits);
                }
                self.halos[pid]
                    .lock()
                    .unwrap()
                    .faces
                    .insert(key, (iteration, data));
            }
        }
        fab.barrier(pid)?;
        Ok(())
    }

    /// Non-blocking discipline: publish, then adopt the newest complete
    /// face if it is newer than the cached one, recording staleness.
    fn exchange_async(&self, fab: &Fabric, pid: Pid) -> Result<(), DistError> {
        let iteration = self.next_exchange(pid);
        self.publish_all(fab, pid, iteration)?;
        for &b in &self.owned[pid] {
            for (key, _) in self.consumed_faces(b) {
                let (version, data) = fab.adopt_face_newest(pid, key)?;
                let mut halo = self.halos[pid].lock().unwrap();
                let cached = halo.faces.get(&key).map_or(-1, |(v, _)| *v);
                if version > cached {
                    for (i, &bits) in data.iter().enumerate() {
                        fab.tags_check(key, i, bits);
                    }
                    halo.faces.insert(key, (version, data));
                }
                let in_use = halo.faces.get(&key).map_or(-1, |(v, _)| *v);
                drop(halo);
                fab.record_staleness(iteration - in_use);
            }
        }
        Ok(())
    }

    /// Racy discipline: element-granular stores/loads on a shared buffer
    /// with no fencing; adoption may interleave with a publish in flight.
    fn exchange_racy(&self, fab: &Fabric, pid: Pid) -> Result<(), DistError> {
        let iteration = self.next_exchange(pid);
        for &b in &self.owned[pid] {
            for (key, _) in self.published_faces(b) {
                let data = self.gather_face(b, key.axis as usize, key.positive);
                let shared = fab.racy_face(key);
                for (i, &bits) in data.iter().enumerate() {
                    fab.tags_record(key, i, bits);
                    shared.elems[i].store(bits, Ordering::Release);
                }
                shared.version.store(iteration, Ordering::Release);
                fab.count_face_message(pid, key)?;
            }
        }
        for &b in &self.owned[pid] {
            for (key, _) in self.consumed_faces(b) {
                let shared = fab.racy_face(key);
                let version = shared.version.load(Ordering::Acquire);
                let mut halo = self.halos[pid].lock().unwrap();
                let cached = halo.faces.get(&key).map_or(-1, |(v, _)| *v);
                if version > cached {
                    let data: Vec<u64> = shared
                        .elems
                        .iter()
                        .map(|e| e.load(Ordering::Acquire))
                        .collect();
                    for (i, &bits) in data.iter().enumerate() {
                        fab.tags_check(key, i, bits);
                    }
                    halo.faces.insert(key, (version, data));
                }
                let in_use = halo.faces.get(&key).map_or(-1, |(v, _)| *v);
                drop(halo);
                fab.record_staleness(iteration - in_use);
            }
        }
        Ok(())
    }

    /// Whole-array assignment: every process copies its own blocks; no
    /// messages move and adopted halo regions are left untouched.
    pub fn block_copy_from(
        &self,
        fab: &Fabric,
        pid: Pid,
        src: &DistArray,
    ) -> Result<(), DistError> {
        if !self.spec.compatible(&src.spec) {
            return Err(DistError::SpecMismatch {
                dst: self.name.clone(),
                src: src.name.clone(),
            });
        }
        if self.spec.readonly {
            return Err(DistError::ReadOnly {
                name: self.name.clone(),
            });
        }
        // Blocking disciplines bracket the copy so no process copies while a
        // neighbor still reads the previous contents remotely.
        let bracket = matches!(
            self.spec.comm,
            CommMode::OneSidedImmediate | CommMode::HaloSync
        );
        if bracket {
            fab.barrier(pid)?;
        }
        for &b in &self.owned[pid] {
            let dst_store = &self.stores[b];
            let src_store = &src.stores[b];
            for i in 0..dst_store.len() {
                dst_store.store(i, src_store.load(i));
            }
        }
        if bracket {
            fab.barrier(pid)?;
        }
        Ok(())
    }
}
