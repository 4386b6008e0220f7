// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Chunked virtual disks and the migration-time I/O path: a replacement
//! device that absorbs every write, popularity-driven outsourcing of hot
//! read chunks, dirty-block tracking per pre-copy round, a binary diff
//! container for shipping dirty chunks, and per-chunk hash manifests.
//!
//! The original disk is never mutated while a router is in front of it, so
//! the migration engine can stream it round by round while the workload
//! keeps running against the merged view.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

const DIFF_MAGIC: &[u8; 4] = b"KDIF";
const DIFF_VERSION: u8 = 0x01;
/// Upper bound on chunk sizes the diff decoder will accept; keeps a
/// corrupted header from driving a huge allocation.
const MAX_CHUNK_SIZE: u32 = 1 << 24;

pub const DEFAULT_CHUNK_SIZE: u32 = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("chunk size {0} is not a power of two")]
    ChunkSizeNotPowerOfTwo(u32),
    #[error("chunk index {index} out of range (disk has {count} chunks)")]
    BadChunkIndex { index: u64, count: u64 },
    #[error("chunk payload is {got} bytes, disk chunk size is {expected}")]
    BadChunkLength { expected: u32, got: usize },
    #[error("popularity threshold must be at least 1")]
    BadThreshold,
    #[error("diff container malformed: {0}")]
    Encoding(#[from] WireError),
    #[error("diff container has bad magic bytes")]
    BadMagic,
    #[error("diff container has unsupported version {0}")]
    BadVersion(u8),
    #[error("diff container chunk size {0} is invalid")]
    BadDiffChunkSize(u32),
    #[error("diff container length disagrees with its record count")]
    BadRecordFraming,
    #[error("diff trailer digest does not match the records")]
    DigestMismatch,
    #[error("diff records are not strictly ascending by chunk index")]
    UnsortedRecords,
    #[error("diff chunk size {diff} does not match disk chunk size {disk}")]
    ChunkSizeMismatch { diff: u32, disk: u32 },
    #[error("diff origin {diff:?} does not match disk {disk:?}")]
    OriginMismatch { diff: String, disk: String },
}

/// Read access to a chunk-addressed byte store. Implemented by the plain
/// disk and by the router's merged view, so manifests and diffs can be
/// taken from either.
pub trait ChunkView {
    fn disk_id(&self) -> &str;
    fn chunk_size(&self) -> u32;
    fn chunk_count(&self) -> u64;
    fn chunk(&self, index: u64) -> Result<&[u8], StorageError>;
}

/// A fixed-geometry disk stored as one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualDisk {
    disk_id: String,
    chunk_size: u32,
    chunk_count: u64,
    data: Vec<u8>,
}

impl VirtualDisk {
    pub fn zeroed(
        disk_id: impl Into<String>,
        chunk_size: u32,
        chunk_count: u64,
    ) -> Result<Self, StorageError> {
        if chunk_size == 0 || !chunk_size.is_power_of_two() {
            return Err(StorageError::ChunkSizeNotPowerOfTwo(chunk_size));
        }
        Ok(Self {
            disk_id: disk_id.into(),
            chunk_size,
            chunk_count,
            data: vec![0u8; (chunk_size as u64 * chunk_count) as usize],
        })
    }

    pub fn write_chunk(&mut self, index: u64, data: &[u8]) -> Result<(), StorageError> {
        let range = self.chunk_range(index)?;
        if data.len() != self.chunk_size as usize {
            return Err(StorageError::BadChunkLength {
                expected: self.chunk_size,
                got: data.len(),
            });
        }
        self.data[range].copy_from_slice(data);
        Ok(())
    }

    /// Overwrite every byte with zeros.
    pub fn zeroize(&mut self) {
        self.data.fill(0);
    }

    fn chunk_range(&self, index: u64) -> Result<std::ops::Range<usize>, StorageError> {
        if index >= self.chunk_count {
            return Err(StorageError::BadChunkIndex {
                index,
                count: self.chunk_count,
            });
        }
        let start = (index * self.chunk_size as u64) as usize;
        Ok(start..start + self.chunk_size as usize)
    }
}

impl ChunkView for VirtualDisk {
    fn disk_id(&self) -> &str {
        &self.disk_id
    }

    fn chunk_size(&self) -> u32 {
        self.chunk_size
    }

    fn chunk_count(&self) -> u64 {
        self.chunk_count
    }

    fn chunk(&self, index: u64) -> Result<&[u8], StorageError> {
        let range = self.chunk_range(index)?;
        Ok(&self.data[range])
    }
}

/// Sparse overlay holding every written (and every outsourced) chunk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplacementDevice {
    blocks: BTreeMap<u64, Vec<u8>>,
}

impl ReplacementDevice {
    pub fn contains(&self, index: u64) -> bool {
        self.blocks.contains_key(&index)
    }

    pub fn get(&self, index: u64) -> Option<&[u8]> {
        self.blocks.get(&index).map(Vec::as_slice)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn zeroize(&mut self) {
        for block in self.blocks.values_mut() {
            block.fill(0);
        }
    }
}

/// Per-chunk read counters with an outsourcing threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopularityTracker {
    read_counts: BTreeMap<u64, u64>,
    threshold: u64,
}

impl PopularityTracker {
    pub fn new(threshold: u64) -> Result<Self, StorageError> {
        if threshold == 0 {
            return Err(StorageError::BadThreshold);
        }
        Ok(Self {
            read_counts: BTreeMap::new(),
            threshold,
        })
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn read_count(&self, index: u64) -> u64 {
        self.read_counts.get(&index).copied().unwrap_or(0)
    }

    /// Count one read; true when the chunk has reached the threshold.
    fn record(&mut self, index: u64) -> bool {
        let count = self.read_counts.entry(index).or_insert(0);
        *count += 1;
        *count >= self.threshold
    }
}

/// Dirty-chunk set for the current round plus the drained history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirtyBlockTracker {
    dirty: BTreeSet<u64>,
    round: u32,
    history: Vec<BTreeSet<u64>>,
}

impl DirtyBlockTracker {
    pub fn mark(&mut self, index: u64) {
        self.dirty.insert(index);
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn pending(&self) -> &BTreeSet<u64> {
        &self.dirty
    }

    /// Hand back this round's dirty set and start the next round.
    pub fn drain(&mut self) -> BTreeSet<u64> {
        let set = std::mem::take(&mut self.dirty);
        self.history.push(set.clone());
        self.round += 1;
        set
    }

    pub fn history(&self) -> &[BTreeSet<u64>] {
        &self.history
    }
}

/// Who is asking for the chunk. VM reads feed the popularity tracker;
/// migration reads are invisible to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Requester {
    Vm,
    Migration,
}

/// Which device actually served a read. `Merged` marks the read that pulled
/// the chunk from the original device into the replacement device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServedBy {
    Original,
    Replacement,
    Merged,
}

/// Running totals of how reads were routed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RouterStats {
    pub reads_from_original: u64,
    pub reads_from_replacement: u64,
    pub outsourced_chunks: u64,
    pub writes: u64,
}

/// The migration-time I/O path in front of one disk: all writes land on the
/// replacement device, reads merge the two devices, and hot chunks are
/// outsourced so later reads stop touching the original.
#[derive(Debug, Clone)]
pub struct IoRouter {
    original: VirtualDisk,
    replacement: ReplacementDevice,
    popularity: PopularityTracker,
    dbt: DirtyBlockTracker,
    stats: RouterStats,
}

impl IoRouter {
    pub fn new(original: VirtualDisk, threshold: u64) -> Result<Self, StorageError> {
        Ok(Self {
            original,
            replacement: ReplacementDevice::default(),
            popularity: PopularityTracker::new(threshold)?,
            dbt: DirtyBlockTracker::default(),
            stats: RouterStats::default(),
        })
    }

    pub fn original(&self) -> &VirtualDisk {
        &self.original
    }

    pub fn replacement(&self) -> &ReplacementDevice {
        &self.replacement
    }

    pub fn stats(&self) -> RouterStats {
        self.stats
    }

    pub fn read_count(&self, index: u64) -> u64 {
        self.popularity.read_count(index)
    }

    pub fn io_write(&mut self, index: u64, data: &[u8]) -> Result<(), StorageError> {
        if index >= self.original.chunk_count {
            return Err(StorageError::BadChunkIndex {
                index,
                count: self.original.chunk_count,
            });
        }
        if data.len() != self.original.chunk_size as usize {
            return Err(StorageError::BadChunkLength {
                expected: self.original.chunk_size,
                got: data.len(),
            });
        }
        self.replacement.blocks.insert(index, data.to_vec());
        self.dbt.mark(index);
        self.stats.writes += 1;
        Ok(())
    }

    pub fn io_read(
        &mut self,
        index: u64,
        requester: Requester,
    ) -> Result<(&[u8], ServedBy), StorageError> {
        if index >= self.original.chunk_count {
            return Err(StorageError::BadChunkIndex {
                index,
                count: self.original.chunk_count,
            });
        }
        let popular = match requester {
            Requester::Vm => self.popularity.record(index),
            Requester::Migration => false,
        };
        let served = if self.replacement.contains(index) {
            ServedBy::Replacement
        } else if popular {
            // Outsource: copy the chunk so every later read is served by
            // the replacement device. Identical bytes, so not marked dirty.
            let bytes = self.original.chunk(index)?.to_vec();
            self.replacement.blocks.insert(index, bytes);
            self.stats.outsourced_chunks += 1;
            ServedBy::Merged
        } else {
            ServedBy::Original
        };
        let bytes = match served {
            ServedBy::Original => {
                self.stats.reads_from_original += 1;
                self.original.chunk(index)?
            }
            ServedBy::Replacement | ServedBy::Merged => {
                self.stats.reads_from_replacement += 1;
                self.replacement
                    .get(index)
                    .expect("replacement holds the chunk on this path")
            }
        };
        Ok((bytes, served))
    }

    /// This round's dirty chunk set; the tracker moves to the next round.
    pub fn dbt_drain(&mut self) -> BTreeSet<u64> {
        self.dbt.drain()
    }

    pub fn dbt(&self) -> &DirtyBlockTracker {
        &self.dbt
    }

    /// The merged read-only view (replacement over original).
    pub fn merged(&self) -> MergedView<'_> {
        MergedView { router: self }
    }

    /// Zero every byte the router can reach, original and replacement both.
    pub fn zeroize(&mut self) {
        self.original.zeroize();
        self.replacement.zeroize();
    }
}

/// Read-only merged view over a router.
#[derive(Debug, Clone, Copy)]
pub struct MergedView<'a> {
    router: &'a IoRouter,
}

impl ChunkView for MergedView<'_> {
    fn disk_id(&self) -> &str {
        self.router.original.disk_id()
    }

    fn chunk_size(&self) -> u32 {
        self.router.original.chunk_size()
    }

    fn chunk_count(&self) -> u64 {
        self.router.original.chunk_count()
    }

    fn chunk(&self, index: u64) -> Result<&[u8], StorageError> {
        if let Some(bytes) = self.router.replacement.get(index) {
            return Ok(bytes);
        }
        self.router.original.chunk(index)
    }
}

/// A decoded diff container: the changed chunks of one disk, sorted by
/// index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffFile {
    pub chunk_size: u32,
    pub origin: String,
    pub records: Vec<(u64, Vec<u8>)>,
}

/// Capture the chunks at `indices` from `view` into a diff container.
pub fn diff_encode<V: ChunkView + ?Sized>(
    view: &V,
    indices: &BTreeSet<u64>,
) -> Result<DiffFile, StorageError> {
    let mut records = Vec::with_capacity(indices.len());
    for &index in indices {
        records.push((index, view.chunk(index)?.to_vec()));
    }
    Ok(DiffFile {
        chunk_size: view.chunk_size(),
        origin: view.disk_id().to_string(),
        records,
    })
}

/// Write the diff's records onto `disk`. The container must match the
/// disk's geometry and identity; every index must be in range.
pub fn diff_apply(disk: &mut VirtualDisk, diff: &DiffFile) -> Result<(), StorageError> {
    if diff.chunk_size != disk.chunk_size {
        return Err(StorageError::ChunkSizeMismatch {
            diff: diff.chunk_size,
            disk: disk.chunk_size,
        });
    }
    if diff.origin != disk.disk_id {
        return Err(StorageError::OriginMismatch {
            diff: diff.origin.clone(),
            disk: disk.disk_id.clone(),
        });
    }
    for (index, _) in &diff.records {
        if *index >= disk.chunk_count {
            return Err(StorageError::BadChunkIndex {
                index: *index,
                count: disk.chunk_count,
            });
        }
    }
    for (index, payload) in &diff.records {
        disk.write_chunk(*index, payload)?;
    }
    Ok(())
}

impl DiffFile {
    /// Bit-exact container encoding. Layout: magic `KDIF`, version 0x01,
    /// chunk_size u32, disk_id (u16 length prefix), record count u32,
    /// records as (index u64 ‖ payload of chunk_size bytes), SHA-256
    /// trailer over the encoded records. Little-endian integers.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(DIFF_MAGIC);
        w.put_u8(DIFF_VERSION);
        w.put_u32(self.chunk_size);
        w.put_str(&self.origin);
        w.put_u32(self.records.len() as u32);
        let mut body = Writer::new();
        for (index, payload) in &self.records {
            body.put_u64(*index);
            body.put_raw(payload);
        }
        let body = body.into_bytes();
        let digest: [u8; 32] = Sha256::digest(&body).into();
        w.put_raw(&body);
        w.put_raw(&digest);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StorageError> {
        let mut r = Reader::new(bytes);
        if r.take_fixed::<4>()? != *DIFF_MAGIC {
            return Err(StorageError::BadMagic);
        }
        let version = r.take_u8()?;
        if version != DIFF_VERSION {
            return Err(StorageError::BadVersion(version));
        }
        let chunk_size = r.take_u32()?;
        if chunk_size == 0 || !chunk_size.is_power_of_two() || chunk_size > MAX_CHUNK_SIZE {
            return Err(StorageError::BadDiffChunkSize(chunk_size));
        }
        let origin = r.take_str()?;
        let count = r.take_u32()? as usize;
        let record_len = 8 + chunk_size as usize;
        let expected_body = count
            .checked_mul(record_len)
            .ok_or(StorageError::BadRecordFraming)?;
        if r.remaining() != expected_body + 32 {
            return Err(StorageError::BadRecordFraming);
        }
        let body = r.take_raw(expected_body)?.to_vec();
        let trailer = r.take_fixed::<32>()?;
        r.finish()?;
        let digest: [u8; 32] = Sha256::digest(&body).into();
        if digest != trailer {
            return Err(StorageError::DigestMismatch);
        }
        let mut records = Vec::with_capacity(count);
        let mut body_reader = Reader::new(&body);
        let mut last_index: Option<u64> = None;
        for _ in 0..count {
            let index = body_reader.take_u64()?;
            let payload = body_reader.take_raw(chunk_size as usize)?.to_vec();
            if let Some(last) = last_index {
                if index <= last {
                    return Err(StorageError::UnsortedRecords);
                }
            }
            last_index = Some(index);
            records.push((index, payload));
        }
        body_reader.finish()?;
        Ok(Self {
            chunk_size,
            origin,
            records,
        })
    }
}

/// Per-chunk SHA-256 digests plus a root over their concatenation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskManifest {
    pub chunk_digests: Vec<[u8; 32]>,
    pub root: [u8; 32],
}

/// Hash every chunk of the view in index order; the root is the hash of
/// the concatenated chunk digests. Deterministic for a given content.
pub fn disk_manifest<V: ChunkView + ?Sized>(view: &V) -> Result<DiskManifest, StorageError> {
    let mut chunk_digests = Vec::with_capacity(view.chunk_count() as usize);
    let mut root_hasher = Sha256::new();
    for index in 0..view.chunk_count() {
        let digest: [u8; 32] = Sha256::digest(view.chunk(index)?).into();
        root_hasher.update(digest);
        chunk_digests.push(digest);
    }
    Ok(DiskManifest {
        chunk_digests,
        root: root_hasher.finalize().into(),
    })
}
