//! Page-aware slab allocation over the virtual address space.
//!
//! Stage 1 of the planner. Each page holds variables of a single size, so
//! no allocation ever straddles a page boundary. When several pages of a
//! size class have free slots, the allocator picks the one with the fewest,
//! which gives mostly-empty pages a chance to die and keeps the live-page
//! count tracking the live-variable count.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::bytecode::MAX_ADDR;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocError {
    ZeroSize,
    /// Larger than one page; pick a bigger page_shift at plan time instead.
    Oversize { size: u64, page_units: u64 },
    UnknownAddress(u64),
    DoubleFree(u64),
    AddressSpaceExhausted,
}

impl fmt::Display for AllocError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocError::ZeroSize => write!(f, "zero-size allocation"),
            AllocError::Oversize { size, page_units } => {
                write!(f, "allocation of {size} units exceeds page size {page_units}")
            }
            AllocError::UnknownAddress(a) => write!(f, "address {a:#x} was never allocated"),
            AllocError::DoubleFree(a) => write!(f, "double free of address {a:#x}"),
            AllocError::AddressSpaceExhausted => write!(f, "virtual address space exhausted"),
        }
    }
}

impl core::error::Error for AllocError {}

struct PageRecord {
    slot_size: u64,
    capacity: u32,
    free_count: u32,
    /// Bit set = slot occupied.
    bitmap: Vec<u64>,
}

impl PageRecord {
    fn first_free(&self) -> Option<u32> {
        for (w, &word) in self.bitmap.iter().enumerate() {
            if word != u64::MAX {
                let bit = (!word).trailing_zeros();
                let slot = w as u32 * 64 + bit;
                if slot < self.capacity {
                    return Some(slot);
                }
            }
        }
        None
    }
}

/// Allocator statistics; `peak_live_units` is the largest set of live
/// allocation units at any point of the build, i.e. the program's true
/// memory demand in units.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AllocatorStats {
    pub pages_ever_allocated: u64,
    pub peak_live_pages: u64,
    pub live_allocations: u64,
    pub live_pages: u64,
    pub peak_live_units: u64,
    /// Classic fragmentation sampled at the peak-live-pages instant:
    /// unusable tail units of live pages over total units of live pages.
    pub frag_waste_units: u64,
    pub frag_total_units: u64,
}

impl AllocatorStats {
    pub fn classic_fragmentation_ratio(&self) -> f64 {
        if self.frag_total_units == 0 {
            0.0
        } else {
            self.frag_waste_units as f64 / self.frag_total_units as f64
        }
    }
}

pub struct SlabAllocator {
    page_shift: u8,
    pages: BTreeMap<u64, PageRecord>,
    /// Per size class, candidate pages keyed by (free_count, page_no); the
    /// set's first element is the fewest-free-slots page, lowest number on
    /// ties.
    candidates: BTreeMap<u64, BTreeSet<(u32, u64)>>,
    /// Page numbers are never reused once a page dies.
    next_page: u64,
    live_units: u64,
    live_waste: u64,
    stats: AllocatorStats,
}

impl SlabAllocator {
    pub fn new(page_shift: u8) -> SlabAllocator {
        assert!(page_shift as u32 <= 40, "page_shift unreasonably large");
        SlabAllocator {
            page_shift,
            pages: BTreeMap::new(),
            candidates: BTreeMap::new(),
            next_page: 0,
            live_units: 0,
            live_waste: 0,
            stats: AllocatorStats::default(),
        }
    }

    pub fn page_shift(&self) -> u8 {
        self.page_shift
    }

    pub fn page_units(&self) -> u64 {
        1u64 << self.page_shift
    }

    pub fn allocate(&mut self, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let page_units = self.page_units();
        if size > page_units {
            return Err(AllocError::Oversize { size, page_units });
        }
        let class = self.candidates.entry(size).or_default();
        let page_no = match class.iter().next().copied() {
            Some((free, page_no)) => {
                class.remove(&(free, page_no));
                page_no
            }
            None => {
                let page_no = self.next_page;
                if page_no > (MAX_ADDR >> self.page_shift) {
                    return Err(AllocError::AddressSpaceExhausted);
                }
                self.next_page += 1;
                let capacity = (page_units / size) as u32;
                self.pages.insert(
                    page_no,
                    PageRecord {
                        slot_size: size,
                        capacity,
                        free_count: capacity,
                        bitmap: vec![0; (capacity as usize + 63) / 64],
                    },
                );
                self.stats.pages_ever_allocated += 1;
                self.stats.live_pages += 1;
                self.live_waste += page_units - capacity as u64 * size;
                if self.stats.live_pages > self.stats.peak_live_pages {
                    self.stats.peak_live_pages = self.stats.live_pages;
                    self.stats.frag_waste_units = self.live_waste;
                    self.stats.frag_total_units = self.stats.live_pages * page_units;
                }
                page_no
            }
        };
        let page = self.pages.get_mut(&page_no).unwrap();
        let slot = page.first_free().expect("candidate page has a free slot");
        page.bitmap[slot as usize / 64] |= 1 << (slot % 64);
        page.free_count -= 1;
        if page.free_count > 0 {
            self.candidates
                .get_mut(&size)
                .unwrap()
                .insert((page.free_count, page_no));
        }
        self.stats.live_allocations += 1;
        self.live_units += size;
        if self.live_units > self.stats.peak_live_units {
            self.stats.peak_live_units = self.live_units;
        }
        Ok((page_no << self.page_shift) | (slot as u64 * size))
    }

    pub fn deallocate(&mut self, addr: u64) -> Result<(), AllocError> {
        let page_no = addr >> self.page_shift;
        let offset = addr & (self.page_units() - 1);
        let page = self
            .pages
            .get_mut(&page_no)
            .ok_or(AllocError::UnknownAddress(addr))?;
        if offset % page.slot_size != 0 {
            return Err(AllocError::UnknownAddress(addr));
        }
        let slot = (offset / page.slot_size) as u32;
        if slot >= page.capacity {
            return Err(AllocError::UnknownAddress(addr));
        }
        let mask = 1u64 << (slot % 64);
        if page.bitmap[slot as usize / 64] & mask == 0 {
            return Err(AllocError::DoubleFree(addr));
        }
        page.bitmap[slot as usize / 64] &= !mask;
        let size = page.slot_size;
        let was_full = page.free_count == 0;
        page.free_count += 1;
        let now_empty = page.free_count == page.capacity;
        let free_count = page.free_count;
        let capacity = page.capacity;
        self.stats.live_allocations -= 1;
        self.live_units -= size;
        let class = self.candidates.get_mut(&size).unwrap();
        if !was_full {
            class.remove(&(free_count - 1, page_no));
        }
        if now_empty {
            // The page dies: it leaves the candidate set for good and its
            // number is never handed out again.
            self.pages.remove(&page_no);
            self.stats.live_pages -= 1;
            self.live_waste -= self.page_units() - capacity as u64 * size;
        } else {
            class.insert((free_count, page_no));
        }
        Ok(())
    }

    pub fn stats(&self) -> AllocatorStats {
        self.stats.clone()
    }

    pub fn live_allocations(&self) -> u64 {
        self.stats.live_allocations
    }

    /// Free-slot count of a page, if it is live. Test hook for checking the
    /// fewest-free-slots rule against a reference scan.
    pub fn page_free_slots(&self, page_no: u64) -> Option<u32> {
        self.pages.get(&page_no).map(|p| p.free_count)
    }

    pub fn live_page_numbers(&self) -> Vec<u64> {
        self.pages.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_single_page_in_order() {
        let mut a = SlabAllocator::new(3); // 8-unit pages
        assert_eq!(a.allocate(1).unwrap(), 0);
        assert_eq!(a.allocate(1).unwrap(), 1);
        assert_eq!(a.allocate(1).unwrap(), 2);
    }

    #[test]
    fn fewest_free_slots_wins() {
        let mut a = SlabAllocator::new(3);
        // Fill page 0 with eight 1-unit slots, page 1 with four of them.
        let page0: Vec<u64> = (0..8).map(|_| a.allocate(1).unwrap()).collect();
        let page1: Vec<u64> = (0..8).map(|_| a.allocate(1).unwrap()).collect();
        // Page 0 gets 1 free slot, page 1 gets 3.
        a.deallocate(page0[3]).unwrap();
        for &addr in &page1[..3] {
            a.deallocate(addr).unwrap();
        }
        // Forced by the fewest-free-slots rule: lands in page 0.
        assert_eq!(a.allocate(1).unwrap(), page0[3]);
    }

    #[test]
    fn leftover_tail_forces_new_page() {
        let mut a = SlabAllocator::new(3); // 8 units; two 3-unit slots fit
        assert_eq!(a.allocate(3).unwrap() >> 3, 0);
        assert_eq!(a.allocate(3).unwrap() >> 3, 0);
        assert_eq!(a.allocate(3).unwrap() >> 3, 1);
        // 2 leftover units per page are classic fragmentation.
        assert_eq!(a.stats().frag_waste_units, 2 * 2);
    }

    #[test]
    fn freed_slot_is_reused() {
        let mut a = SlabAllocator::new(3);
        let x = a.allocate(1).unwrap();
        let _y = a.allocate(1).unwrap();
        a.deallocate(x).unwrap();
        assert_eq!(a.allocate(1).unwrap(), x);
    }

    #[test]
    fn emptied_page_dies_and_number_is_not_reused() {
        let mut a = SlabAllocator::new(3);
        let x = a.allocate(4).unwrap();
        let y = a.allocate(4).unwrap();
        assert_eq!(a.stats().live_pages, 1);
        a.deallocate(x).unwrap();
        a.deallocate(y).unwrap();
        assert_eq!(a.stats().live_pages, 0);
        // A fresh allocation of the same class opens page 1, not page 0.
        assert_eq!(a.allocate(4).unwrap() >> 3, 1);
    }

    #[test]
    fn double_free_and_unknown_address() {
        let mut a = SlabAllocator::new(3);
        let x = a.allocate(2).unwrap();
        let _keep = a.allocate(2).unwrap();
        a.deallocate(x).unwrap();
        assert_eq!(a.deallocate(x), Err(AllocError::DoubleFree(x)));
        assert_eq!(a.deallocate(999 << 3), Err(AllocError::UnknownAddress(999 << 3)));
        // Misaligned offset inside a live page.
        assert_eq!(a.deallocate(1), Err(AllocError::UnknownAddress(1)));
    }

    #[test]
    fn oversize_rejected() {
        let mut a = SlabAllocator::new(3);
        assert!(matches!(a.allocate(9), Err(AllocError::Oversize { .. })));
        assert_eq!(a.allocate(0), Err(AllocError::ZeroSize));
    }

    #[test]
    fn peak_units_tracks_w() {
        let mut a = SlabAllocator::new(4);
        let x = a.allocate(8).unwrap();
        let y = a.allocate(8).unwrap();
        a.deallocate(x).unwrap();
        a.deallocate(y).unwrap();
        let _z = a.allocate(8).unwrap();
        assert_eq!(a.stats().peak_live_units, 16);
        assert_eq!(a.stats().live_allocations, 1);
    }
}
