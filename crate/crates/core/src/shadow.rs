//! Word-granular shadow memory with redzones and a free quarantine.
//!
//! The address space is split into three equal segments (global, stack,
//! heap). Every object occupies a slot `[left redzone | payload | right
//! redzone]`; slots are handed out first-fit from a per-segment free list and
//! otherwise bump-allocated. Each word of the space carries a [`WordState`],
//! which is all that [`ShadowMap::check`] consults.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Addr = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Global,
    Stack,
    Heap,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Global, Region::Stack, Region::Heap];

    fn index(self) -> usize {
        match self {
            Region::Global => 0,
            Region::Stack => 1,
            Region::Heap => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordState {
    Unallocated,
    Addressable,
    LeftRedzone,
    RightRedzone,
    Freed,
}

impl WordState {
    pub fn is_valid(self) -> bool {
        self == WordState::Addressable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectState {
    Live,
    Quarantined,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryObject {
    pub id: ObjectId,
    pub name: String,
    pub base: Addr,
    pub size: u32,
    pub region: Region,
    pub state: ObjectState,
}

impl MemoryObject {
    pub fn contains(&self, addr: Addr) -> bool {
        addr >= self.base && addr < self.base + self.size as Addr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Overflow,
    Underflow,
    UseAfterFree,
    Wild,
    DoubleFree,
    BadFree,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultKind::Overflow => "overflow",
            FaultKind::Underflow => "underflow",
            FaultKind::UseAfterFree => "use_after_free",
            FaultKind::Wild => "wild",
            FaultKind::DoubleFree => "double_free",
            FaultKind::BadFree => "bad_free",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessVerdict {
    pub ok: bool,
    pub fault: Option<FaultKind>,
}

impl AccessVerdict {
    pub const OK: AccessVerdict = AccessVerdict { ok: true, fault: None };

    fn fault(kind: FaultKind) -> Self {
        AccessVerdict {
            ok: false,
            fault: Some(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShadowError {
    #[error("cannot place {size}-word object `{name}` in the {region:?} segment")]
    OutOfAddressSpace { name: String, size: u32, region: Region },
    #[error("object size must be at least one word")]
    ZeroSize,
    #[error("{0} freed twice")]
    DoubleFree(ObjectId),
    #[error("free of non-heap or unknown address {0}")]
    BadFree(Addr),
    #[error("no object {0}")]
    NoSuchObject(ObjectId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowConfig {
    /// Words per segment; the whole space is three segments.
    pub segment_words: u64,
    pub redzone_words: u64,
    pub quarantine_cap: usize,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            segment_words: 1 << 15,
            redzone_words: 8,
            quarantine_cap: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShadowMap {
    cfg: ShadowConfig,
    words: Vec<WordState>,
    objects: Vec<MemoryObject>,
    quarantine: VecDeque<ObjectId>,
    /// Per segment: free slot start -> length, coalesced.
    free: [BTreeMap<u64, u64>; 3],
    bump: [u64; 3],
}

impl Default for ShadowMap {
    fn default() -> Self {
        ShadowMap::new(ShadowConfig::default())
    }
}

impl ShadowMap {
    pub fn new(cfg: ShadowConfig) -> Self {
        let s = cfg.segment_words;
        ShadowMap {
            cfg,
            words: vec![WordState::Unallocated; (3 * s) as usize],
            objects: Vec::new(),
            quarantine: VecDeque::new(),
            free: Default::default(),
            // The first redzone of the global segment is a null guard.
            bump: [cfg.redzone_words.min(s), s, 2 * s],
        }
    }

    pub fn config(&self) -> &ShadowConfig {
        &self.cfg
    }

    pub fn address_space(&self) -> u64 {
        self.words.len() as u64
    }

    fn segment_end(&self, region: Region) -> u64 {
        (region.index() as u64 + 1) * self.cfg.segment_words
    }

    fn take_slot(&mut self, region: Region, len: u64) -> Option<u64> {
        let seg = region.index();
        let hit = self.free[seg].iter().find(|(_, l)| **l >= len).map(|(s, l)| (*s, *l));
        if let Some((start, avail)) = hit {
            self.free[seg].remove(&start);
            if avail > len {
                self.free[seg].insert(start + len, avail - len);
            }
            return Some(start);
        }
        let start = self.bump[seg];
        if start + len > self.segment_end(region) {
            return None;
        }
        self.bump[seg] += len;
        Some(start)
    }

    fn return_slot(&mut self, region: Region, mut start: u64, mut len: u64) {
        let seg = region.index();
        if let Some((&ps, &pl)) = self.free[seg].range(..start).next_back() {
            if ps + pl == start {
                self.free[seg].remove(&ps);
                start = ps;
                len += pl;
            }
        }
        if let Some(&nl) = self.free[seg].get(&(start + len)) {
            self.free[seg].remove(&(start + len));
            len += nl;
        }
        if start + len == self.bump[seg] {
            self.bump[seg] = start;
        } else {
            self.free[seg].insert(start, len);
        }
    }

    fn fill(&mut self, from: u64, len: u64, state: WordState) {
        for w in &mut self.words[from as usize..(from + len) as usize] {
            *w = state;
        }
    }

    /// Place a new live object. Its payload becomes addressable and is
    /// flanked by `redzone_words` of poison on each side.
    pub fn allocate(&mut self, name: &str, size: u32, region: Region) -> Result<ObjectId, ShadowError> {
        if size == 0 {
            return Err(ShadowError::ZeroSize);
        }
        let rz = self.cfg.redzone_words;
        let slot = self
            .take_slot(region, rz + size as u64 + rz)
            .ok_or_else(|| ShadowError::OutOfAddressSpace {
                name: name.to_string(),
                size,
                region,
            })?;
        let base = slot + rz;
        self.fill(slot, rz, WordState::LeftRedzone);
        self.fill(base, size as u64, WordState::Addressable);
        self.fill(base + size as u64, rz, WordState::RightRedzone);
        let id = ObjectId(self.objects.len() as u32);
        self.objects.push(MemoryObject {
            id,
            name: name.to_string(),
            base: base as Addr,
            size,
            region,
            state: ObjectState::Live,
        });
        Ok(id)
    }

    /// Free a heap object into the quarantine, evicting the oldest entries
    /// once the quarantine exceeds its capacity.
    pub fn free(&mut self, id: ObjectId) -> Result<(), ShadowError> {
        let obj = self.objects.get(id.0 as usize).ok_or(ShadowError::NoSuchObject(id))?;
        if obj.region != Region::Heap {
            return Err(ShadowError::BadFree(obj.base));
        }
        match obj.state {
            ObjectState::Live => {}
            ObjectState::Quarantined => return Err(ShadowError::DoubleFree(id)),
            ObjectState::Released => return Err(ShadowError::BadFree(obj.base)),
        }
        let (base, size) = (obj.base as u64, obj.size as u64);
        self.fill(base, size, WordState::Freed);
        self.objects[id.0 as usize].state = ObjectState::Quarantined;
        self.quarantine.push_back(id);
        while self.quarantine.len() > self.cfg.quarantine_cap {
            let old = self.quarantine.pop_front().expect("non-empty");
            self.release(old)?;
        }
        Ok(())
    }

    /// Free by payload base address, as the `free` intrinsic does.
    pub fn free_at(&mut self, addr: Addr) -> Result<ObjectId, ShadowError> {
        let found = self
            .objects
            .iter()
            .rev()
            .find(|o| o.base == addr && o.state != ObjectState::Released)
            .map(|o| o.id);
        match found {
            Some(id) => self.free(id).map(|_| id),
            None => Err(ShadowError::BadFree(addr)),
        }
    }

    /// Return an object's slot to its segment; all of its words become
    /// unallocated. Used for quarantine eviction and stack frame pops.
    pub fn release(&mut self, id: ObjectId) -> Result<(), ShadowError> {
        let obj = self.objects.get(id.0 as usize).ok_or(ShadowError::NoSuchObject(id))?;
        if obj.state == ObjectState::Released {
            return Ok(());
        }
        let rz = self.cfg.redzone_words;
        let (start, len, region) = (obj.base as u64 - rz, obj.size as u64 + 2 * rz, obj.region);
        self.fill(start, len, WordState::Unallocated);
        self.objects[id.0 as usize].state = ObjectState::Released;
        self.quarantine.retain(|q| *q != id);
        self.return_slot(region, start, len);
        Ok(())
    }

    pub fn state(&self, addr: Addr) -> WordState {
        usize::try_from(addr)
            .ok()
            .and_then(|a| self.words.get(a))
            .copied()
            .unwrap_or(WordState::Unallocated)
    }

    /// Validity of `[addr, addr + width)`. Faults are classified by the
    /// state of the first invalid word: a right redzone means overflow, a
    /// left redzone underflow, a quarantined payload use-after-free, and
    /// anything else (including addresses outside the space) a wild access.
    pub fn check(&self, addr: Addr, width: u32) -> AccessVerdict {
        for k in 0..width.max(1) as Addr {
            let state = match addr.checked_add(k) {
                Some(a) => self.state(a),
                None => WordState::Unallocated,
            };
            let kind = match state {
                WordState::Addressable => continue,
                WordState::RightRedzone => FaultKind::Overflow,
                WordState::LeftRedzone => FaultKind::Underflow,
                WordState::Freed => FaultKind::UseAfterFree,
                WordState::Unallocated => FaultKind::Wild,
            };
            return AccessVerdict::fault(kind);
        }
        AccessVerdict::OK
    }

    pub fn object(&self, id: ObjectId) -> Option<&MemoryObject> {
        self.objects.get(id.0 as usize)
    }

    pub fn objects(&self) -> &[MemoryObject] {
        &self.objects
    }

    pub fn quarantine(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.quarantine.iter().copied()
    }

    /// Heap objects that were never freed.
    pub fn leak_report(&self) -> Vec<ObjectId> {
        self.objects
            .iter()
            .filter(|o| o.region == Region::Heap && o.state == ObjectState::Live)
            .map(|o| o.id)
            .collect()
    }

    /// Maximal runs of poisoned (redzone or freed) words as
    /// `(start, end_exclusive, state)`.
    pub fn poisoned_ranges(&self) -> Vec<(Addr, Addr, WordState)> {
        let mut out: Vec<(Addr, Addr, WordState)> = Vec::new();
        for (a, w) in self.words.iter().enumerate() {
            if matches!(w, WordState::Addressable | WordState::Unallocated) {
                continue;
            }
            match out.last_mut() {
                Some(last) if last.1 == a as Addr && last.2 == *w => last.1 += 1,
                _ => out.push((a as Addr, a as Addr + 1, *w)),
            }
        }
        out
    }

    /// Object table followed by poisoned ranges, one JSON object per line.
    pub fn dump_json_lines(&self) -> String {
        let mut out = String::new();
        for o in &self.objects {
            let line = serde_json::json!({ "object": o });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        for (start, end, state) in self.poisoned_ranges() {
            let line = serde_json::json!({ "poisoned": { "start": start, "end": end, "state": state } });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ShadowMap {
        ShadowMap::new(ShadowConfig {
            segment_words: 256,
            redzone_words: 4,
            quarantine_cap: 2,
        })
    }

    #[test]
    fn payload_is_bracketed_by_redzones() {
        let mut m = ShadowMap::default();
        let id = m.allocate("a", 3, Region::Heap).unwrap();
        let b = m.object(id).unwrap().base;
        for a in b..b + 3 {
            assert!(m.check(a, 1).ok);
        }
        assert_eq!(m.check(b - 1, 1).fault, Some(FaultKind::Underflow));
        assert_eq!(m.check(b + 3, 1).fault, Some(FaultKind::Overflow));
        assert_eq!(m.check(b + 2, 2).fault, Some(FaultKind::Overflow));
    }

    #[test]
    fn global_buffer_end_is_poisoned() {
        let mut m = ShadowMap::default();
        let id = m.allocate("int_memory", 1024, Region::Global).unwrap();
        let b = m.object(id).unwrap().base;
        assert!(m.check(b + 1023, 1).ok);
        assert_eq!(m.check(b + 1024, 1), AccessVerdict::fault(FaultKind::Overflow));
        assert_eq!(m.check(0, 1).fault, Some(FaultKind::Wild));
    }

    #[test]
    fn neighbours_are_separated_by_both_redzones() {
        let mut m = ShadowMap::default();
        let a = m.allocate("a", 5, Region::Global).unwrap();
        let b = m.allocate("b", 5, Region::Global).unwrap();
        let (a, b) = (m.object(a).unwrap().clone(), m.object(b).unwrap().clone());
        assert!(b.base - (a.base + a.size as Addr) >= 2 * m.config().redzone_words as Addr);
    }

    #[test]
    fn free_poisons_and_double_free_is_rejected() {
        let mut m = small();
        let id = m.allocate("p", 4, Region::Heap).unwrap();
        let b = m.object(id).unwrap().base;
        m.free(id).unwrap();
        assert_eq!(m.check(b, 1).fault, Some(FaultKind::UseAfterFree));
        assert_eq!(m.free(id), Err(ShadowError::DoubleFree(id)));
        let g = m.allocate("g", 1, Region::Global).unwrap();
        assert!(matches!(m.free(g), Err(ShadowError::BadFree(_))));
    }

    #[test]
    fn quarantine_eviction_releases_oldest_and_reuses_space() {
        let mut m = small();
        let first = m.allocate("first", 4, Region::Heap).unwrap();
        let base = m.object(first).unwrap().base;
        m.free(first).unwrap();
        let mut others = Vec::new();
        for k in 0..m.config().quarantine_cap {
            let id = m.allocate(&format!("o{k}"), 4, Region::Heap).unwrap();
            m.free(id).unwrap();
            others.push(id);
        }
        assert_eq!(m.object(first).unwrap().state, ObjectState::Released);
        assert_eq!(m.check(base, 1).fault, Some(FaultKind::Wild));
        let again = m.allocate("again", 4, Region::Heap).unwrap();
        assert_eq!(m.object(again).unwrap().base, base);
    }

    #[test]
    fn exhausting_a_segment_is_an_error() {
        let mut m = small();
        assert!(matches!(
            m.allocate("big", 1000, Region::Stack),
            Err(ShadowError::OutOfAddressSpace { .. })
        ));
        assert_eq!(m.allocate("z", 0, Region::Stack), Err(ShadowError::ZeroSize));
    }

    #[test]
    fn leak_report_lists_unfreed_heap_objects() {
        let mut m = small();
        assert!(m.leak_report().is_empty());
        let a = m.allocate("a", 2, Region::Heap).unwrap();
        let b = m.allocate("b", 2, Region::Heap).unwrap();
        m.allocate("g", 2, Region::Global).unwrap();
        m.free(a).unwrap();
        assert_eq!(m.leak_report(), vec![b]);
    }

    #[test]
    fn stack_release_coalesces_back_to_bump() {
        let mut m = small();
        let a = m.allocate("a", 3, Region::Stack).unwrap();
        let b = m.allocate("b", 3, Region::Stack).unwrap();
        let first_base = m.object(a).unwrap().base;
        m.release(b).unwrap();
        m.release(a).unwrap();
        let c = m.allocate("c", 20, Region::Stack).unwrap();
        assert_eq!(m.object(c).unwrap().base, first_base);
    }

    /// Replays random allocate/free/release scripts and compares every word
    /// of the space against validity recomputed from the object table.
    #[test]
    fn word_validity_matches_object_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut m = small();
            let mut live: Vec<ObjectId> = Vec::new();
            for _ in 0..60 {
                match rng.gen_range(0..3) {
                    0 | 1 => {
                        let region = Region::ALL[rng.gen_range(0..3)];
                        if let Ok(id) = m.allocate("x", rng.gen_range(1..12), region) {
                            live.push(id);
                        }
                    }
                    _ if !live.is_empty() => {
                        let id = live.swap_remove(rng.gen_range(0..live.len()));
                        if m.object(id).unwrap().region == Region::Heap {
                            m.free(id).unwrap();
                        } else {
                            m.release(id).unwrap();
                        }
                    }
                    _ => {}
                }
                let snapshot = m.clone();
                for a in -2..m.address_space() as Addr + 2 {
                    let oracle = m
                        .objects()
                        .iter()
                        .filter(|o| o.state == ObjectState::Live && o.contains(a))
                        .count();
                    assert!(oracle <= 1);
                    assert_eq!(m.check(a, 1).ok, oracle == 1, "address {a}");
                }
                assert_eq!(m.words, snapshot.words);
            }
        }
    }
}
