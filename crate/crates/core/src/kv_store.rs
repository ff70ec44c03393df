//! Per-layer key/value storage.
//!
//! Each layer owns three stores, all split by kv-head:
//!
//! * [`FullCache`]: every token ever seen; entries are never evicted.
//! * [`PartialCache`]: a bounded subset carrying the selection score each
//!   entry was chosen with, or [`Score::New`] for tokens appended since the
//!   last full-attention step.
//! * [`PendingBuffer`]: tokens decoded against the partial cache that have
//!   not yet been merged into the full cache.
//!
//! Entries keep their original absolute positions. Keys are stored already
//! rotated at that position, so any subset of a cache can be attended to
//! without re-encoding.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::top_k_indices;

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Observed(f64),
    /// Appended after the most recent selection; ranks above every observed
    /// score for eviction purposes.
    New,
}

impl Score {
    fn eviction_rank(self) -> f64 {
        match self {
            Score::Observed(s) => s,
            Score::New => f64::INFINITY,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Score::Observed(s) => Some(s),
            Score::New => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialEntry {
    pub entry: KvEntry,
    pub score: Score,
}

fn check_token(entries: &[KvEntry], n_heads: usize, last: Option<usize>) -> Result<usize> {
    if entries.len() != n_heads {
        return Err(Error::contract(format!(
            "expected one entry per kv-head ({n_heads}), got {}",
            entries.len()
        )));
    }
    let pos = entries[0].position;
    if entries.iter().any(|e| e.position != pos) {
        return Err(Error::contract("kv-heads disagree on the token position"));
    }
    if let Some(last) = last {
        if pos <= last {
            return Err(Error::contract(format!(
                "position {pos} does not follow cached position {last}"
            )));
        }
    }
    Ok(pos)
}

/// Complete cache of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCache {
    heads: Vec<Vec<KvEntry>>,
}

impl FullCache {
    pub fn new(n_kv_heads: usize) -> Self {
        Self {
            heads: vec![Vec::new(); n_kv_heads],
        }
    }

    pub fn heads(&self) -> &[Vec<KvEntry>] {
        &self.heads
    }

    /// Number of tokens held (identical across kv-heads).
    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_position(&self) -> Option<usize> {
        self.heads.first()?.last().map(|e| e.position)
    }

    pub fn positions(&self) -> Vec<usize> {
        self.heads
            .first()
            .map(|h| h.iter().map(|e| e.position).collect())
            .unwrap_or_default()
    }

    /// Append one token (one entry per kv-head).
    pub fn push_token(&mut self, entries: Vec<KvEntry>) -> Result<()> {
        check_token(&entries, self.heads.len(), self.last_position())?;
        for (head, e) in self.heads.iter_mut().zip(entries) {
            head.push(e);
        }
        Ok(())
    }

    /// Move every pending entry into the cache, leaving `pending` empty.
    pub fn merge_pending(&mut self, pending: &mut PendingBuffer) -> Result<()> {
        if pending.heads.len() != self.heads.len() {
            return Err(Error::contract("pending buffer has a different head count"));
        }
        if let (Some(first), Some(last)) = (pending.first_position(), self.last_position()) {
            if first <= last {
                return Err(Error::contract(format!(
                    "pending position {first} overlaps full cache ending at {last}"
                )));
            }
        }
        for (head, p) in self.heads.iter_mut().zip(pending.heads.iter_mut()) {
            head.append(p);
        }
        Ok(())
    }

    pub fn view(&self) -> Vec<Vec<&KvEntry>> {
        self.heads.iter().map(|h| h.iter().collect()).collect()
    }
}

/// Tokens decoded against the partial cache, awaiting merge.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingBuffer {
    heads: Vec<Vec<KvEntry>>,
}

impl PendingBuffer {
    pub fn new(n_kv_heads: usize) -> Self {
        Self {
            heads: vec![Vec::new(); n_kv_heads],
        }
    }

    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn first_position(&self) -> Option<usize> {
        self.heads.first()?.first().map(|e| e.position)
    }

    pub fn positions(&self) -> Vec<usize> {
        self.heads
            .first()
            .map(|h| h.iter().map(|e| e.position).collect())
            .unwrap_or_default()
    }

    pub fn push_token(&mut self, entries: Vec<KvEntry>) -> Result<()> {
        let last = self.heads.first().and_then(|h| h.last()).map(|e| e.position);
        check_token(&entries, self.heads.len(), last)?;
        for (head, e) in self.heads.iter_mut().zip(entries) {
            head.push(e);
        }
        Ok(())
    }
}

/// Bounded, scored subset of a layer's cache, selected per kv-head.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCache {
    heads: Vec<Vec<PartialEntry>>,
    capacity: usize,
}

#[derive(Serialize)]
struct DumpLine {
    layer: usize,
    kv_head: usize,
    position: usize,
    score: Option<f64>,
}

impl PartialCache {
    /// Select, per kv-head, the `k` entries of `full` with the highest score.
    ///
    /// `scores[h]` must align with the entries of head `h` of `full`.
    pub fn init(full: &FullCache, scores: &[Vec<f64>], k: usize) -> Result<Self> {
        if k > full.len() {
            return Err(Error::config(format!(
                "partial cache size {k} exceeds the {} cached tokens",
                full.len()
            )));
        }
        if scores.len() != full.heads.len() {
            return Err(Error::contract("one score vector per kv-head is required"));
        }
        let heads = full
            .heads
            .iter()
            .zip(scores)
            .map(|(entries, s)| {
                if s.len() != entries.len() {
                    return Err(Error::contract(format!(
                        "score vector of length {} for a cache of {}",
                        s.len(),
                        entries.len()
                    )));
                }
                Ok(top_k_indices(s, k)?
                    .into_iter()
                    .map(|i| PartialEntry {
                        entry: entries[i].clone(),
                        score: Score::Observed(s[i]),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            capacity: k,
        })
    }

    /// Replace the whole cache with a fresh selection over `full`.
    pub fn refresh(&mut self, full: &FullCache, scores: &[Vec<f64>], k: usize) -> Result<()> {
        *self = Self::init(full, scores, k)?;
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries per kv-head (equal across heads).
    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> &[Vec<PartialEntry>] {
        &self.heads
    }

    pub fn positions(&self, kv_head: usize) -> Vec<usize> {
        self.heads[kv_head].iter().map(|e| e.entry.position).collect()
    }

    pub fn contains(&self, kv_head: usize, position: usize) -> bool {
        self.heads[kv_head]
            .binary_search_by_key(&position, |e| e.entry.position)
            .is_ok()
    }

    /// Append one token with score [`Score::New`]. When `evict` is set and
    /// the cache is over capacity, each head drops its lowest observed score
    /// (the latest position among equal scores), or its oldest entry when
    /// every entry is new. Returns the evicted position per head.
    pub fn append_and_evict(
        &mut self,
        entries: Vec<KvEntry>,
        evict: bool,
    ) -> Result<Vec<Option<usize>>> {
        if entries.len() != self.heads.len() {
            return Err(Error::contract("one entry per kv-head is required"));
        }
        let mut evicted = Vec::with_capacity(entries.len());
        for (head, entry) in self.heads.iter_mut().zip(entries) {
            if let Some(last) = head.last() {
                if entry.position <= last.entry.position {
                    return Err(Error::contract(format!(
                        "position {} does not follow partial-cache position {}",
                        entry.position, last.entry.position
                    )));
                }
            }
            head.push(PartialEntry {
                entry,
                score: Score::New,
            });
            evicted.push(if evict && head.len() > self.capacity {
                let victim = eviction_victim(head);
                Some(head.remove(victim).entry.position)
            } else {
                None
            });
        }
        Ok(evicted)
    }

    /// Append the token to each head that does not already hold its
    /// position, with the same eviction rule as [`Self::append_and_evict`].
    pub fn ensure_token(&mut self, entries: Vec<KvEntry>, evict: bool) -> Result<()> {
        if entries.len() != self.heads.len() {
            return Err(Error::contract("one entry per kv-head is required"));
        }
        for (head, entry) in self.heads.iter_mut().zip(entries) {
            match head.last() {
                Some(last) if last.entry.position == entry.position => continue,
                Some(last) if last.entry.position > entry.position => {
                    return Err(Error::contract(format!(
                        "position {} does not follow partial-cache position {}",
                        entry.position, last.entry.position
                    )))
                }
                _ => {}
            }
            head.push(PartialEntry {
                entry,
                score: Score::New,
            });
            if evict && head.len() > self.capacity {
                let victim = eviction_victim(head);
                head.remove(victim);
            }
        }
        Ok(())
    }

    pub fn view(&self) -> Vec<Vec<&KvEntry>> {
        self.heads
            .iter()
            .map(|h| h.iter().map(|e| &e.entry).collect())
            .collect()
    }

    /// JSON-lines dump of `(layer, kv_head, position, score)`; new entries
    /// have a null score.
    pub fn dump_jsonl<W: Write>(&self, layer: usize, out: &mut W) -> Result<()> {
        for (kv_head, head) in self.heads.iter().enumerate() {
            for e in head {
                let line = DumpLine {
                    layer,
                    kv_head,
                    position: e.entry.position,
                    score: e.score.value(),
                };
                serde_json::to_writer(&mut *out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

fn eviction_victim(head: &[PartialEntry]) -> usize {
    let mut victim = 0;
    let mut best = f64::INFINITY;
    let mut found = false;
    for (i, e) in head.iter().enumerate() {
        let r = e.score.eviction_rank();
        if r.is_finite() && (!found || r <= best) {
            victim = i;
            best = r;
            found = true;
        }
    }
    // all entries new: oldest goes
    if found {
        victim
    } else {
        0
    }
}
