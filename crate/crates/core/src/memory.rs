//! Byte-exact two-tier memory ledger.
//!
//! The ledger charges semantic bytes (`elements × bytes_per_element`) to a
//! simulated device, tracks the running peak, keeps a host-side tally for
//! stash entries parked in host memory, and logs every host/device transfer.
//! Allocator overhead and fragmentation are not modelled.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    LayerWeights,
    ActivationStash,
    Gradients,
    TransitBuffer,
    Workspace,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::LayerWeights,
        Category::ActivationStash,
        Category::Gradients,
        Category::TransitBuffer,
        Category::Workspace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::LayerWeights => "layer_weights",
            Category::ActivationStash => "activation_stash",
            Category::Gradients => "gradients",
            Category::TransitBuffer => "transit_buffer",
            Category::Workspace => "workspace",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferEvent {
    pub direction: Direction,
    pub bytes: u64,
    pub label: Category,
    pub sequence_index: u64,
}

/// Handle to a live device allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AllocId(u64);

/// Handle to a live host-side stash entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HostId(u64);

#[derive(Debug, Clone, Copy)]
struct Live {
    category: Category,
    bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    budget: Option<u64>,
    current: [u64; 5],
    category_peak: [u64; 5],
    device_in_use: u64,
    device_peak: u64,
    live: BTreeMap<u64, Live>,
    host_live: BTreeMap<u64, u64>,
    host_bytes: u64,
    host_peak: u64,
    next_id: u64,
    transfer_log: Vec<TransferEvent>,
}

/// Immutable summary of a finished run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryReport {
    pub device_peak: u64,
    pub category_peaks: BTreeMap<Category, u64>,
    pub host_peak: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub h2d_by_label: BTreeMap<Category, u64>,
    pub d2h_by_label: BTreeMap<Category, u64>,
    pub transfer_count: usize,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_budget(budget: u64) -> Self {
        MemoryLedger {
            budget: Some(budget),
            ..Self::default()
        }
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn alloc(
        &mut self,
        category: Category,
        element_count: usize,
        precision: Precision,
    ) -> Result<AllocId> {
        if element_count == 0 {
            return Err(Error::Usage(format!(
                "zero-element allocation for {category}"
            )));
        }
        self.alloc_bytes(
            category,
            element_count as u64 * precision.bytes_per_element(),
        )
    }

    pub fn alloc_bytes(&mut self, category: Category, bytes: u64) -> Result<AllocId> {
        if bytes == 0 {
            return Err(Error::Usage(format!("zero-byte allocation for {category}")));
        }
        let wanted = self.device_in_use + bytes;
        if let Some(budget) = self.budget {
            if wanted > budget {
                return Err(Error::OutOfMemory {
                    category,
                    requested: bytes,
                    in_use: self.device_in_use,
                    budget,
                    shortfall: wanted - budget,
                });
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.live.insert(id, Live { category, bytes });
        let c = category.index();
        self.current[c] += bytes;
        self.category_peak[c] = self.category_peak[c].max(self.current[c]);
        self.device_in_use = wanted;
        self.device_peak = self.device_peak.max(wanted);
        Ok(AllocId(id))
    }

    pub fn release(&mut self, handle: AllocId) -> Result<()> {
        let live = self
            .live
            .remove(&handle.0)
            .ok_or_else(|| Error::Usage(format!("release of dead allocation {}", handle.0)))?;
        self.current[live.category.index()] -= live.bytes;
        self.device_in_use -= live.bytes;
        Ok(())
    }

    /// Moves a live allocation to another category without changing the
    /// device total (e.g. a transit buffer becoming the executing layer).
    pub fn recategorize(&mut self, handle: AllocId, category: Category) -> Result<()> {
        let live = self
            .live
            .get_mut(&handle.0)
            .ok_or_else(|| Error::Usage(format!("recategorize of dead allocation {}", handle.0)))?;
        self.current[live.category.index()] -= live.bytes;
        live.category = category;
        let c = category.index();
        self.current[c] += live.bytes;
        self.category_peak[c] = self.category_peak[c].max(self.current[c]);
        Ok(())
    }

    pub fn host_alloc(&mut self, bytes: u64) -> HostId {
        let id = self.next_id;
        self.next_id += 1;
        self.host_live.insert(id, bytes);
        self.host_bytes += bytes;
        self.host_peak = self.host_peak.max(self.host_bytes);
        HostId(id)
    }

    pub fn host_release(&mut self, handle: HostId) -> Result<()> {
        let bytes = self
            .host_live
            .remove(&handle.0)
            .ok_or_else(|| Error::Usage(format!("release of dead host entry {}", handle.0)))?;
        self.host_bytes -= bytes;
        Ok(())
    }

    pub fn record_transfer(
        &mut self,
        direction: Direction,
        bytes: u64,
        label: Category,
    ) -> Result<()> {
        if bytes == 0 {
            return Err(Error::Usage("zero-byte transfer".into()));
        }
        let sequence_index = self.transfer_log.len() as u64;
        self.transfer_log.push(TransferEvent {
            direction,
            bytes,
            label,
            sequence_index,
        });
        Ok(())
    }

    pub fn current(&self, category: Category) -> u64 {
        self.current[category.index()]
    }

    pub fn device_in_use(&self) -> u64 {
        self.device_in_use
    }

    pub fn device_peak(&self) -> u64 {
        self.device_peak
    }

    pub fn host_bytes(&self) -> u64 {
        self.host_bytes
    }

    pub fn transfer_log(&self) -> &[TransferEvent] {
        &self.transfer_log
    }

    pub fn transferred(&self, direction: Direction, label: Option<Category>) -> u64 {
        self.transfer_log
            .iter()
            .filter(|e| e.direction == direction && label.is_none_or(|l| e.label == l))
            .map(|e| e.bytes)
            .sum()
    }

    /// Summarises the run. Fails if anything is still allocated.
    pub fn report(&self) -> Result<MemoryReport> {
        let mut leaks: Vec<(String, u64)> = Category::ALL
            .iter()
            .filter(|c| self.current(**c) != 0)
            .map(|c| (c.name().to_string(), self.current(*c)))
            .collect();
        if self.host_bytes != 0 {
            leaks.push(("host".to_string(), self.host_bytes));
        }
        if !leaks.is_empty() {
            return Err(Error::Leak(leaks));
        }
        Ok(self.snapshot())
    }

    /// Summary without the leak check, for runs that aborted.
    pub fn snapshot(&self) -> MemoryReport {
        let by_label = |dir: Direction| {
            let mut m = BTreeMap::new();
            for e in self.transfer_log.iter().filter(|e| e.direction == dir) {
                *m.entry(e.label).or_insert(0) += e.bytes;
            }
            m
        };
        MemoryReport {
            device_peak: self.device_peak,
            category_peaks: Category::ALL
                .iter()
                .map(|c| (*c, self.category_peak[c.index()]))
                .collect(),
            host_peak: self.host_peak,
            h2d_bytes: self.transferred(Direction::HostToDevice, None),
            d2h_bytes: self.transferred(Direction::DeviceToHost, None),
            h2d_by_label: by_label(Direction::HostToDevice),
            d2h_by_label: by_label(Direction::DeviceToHost),
            transfer_count: self.transfer_log.len(),
        }
    }
}

impl MemoryReport {
    pub fn h2d_for(&self, label: Category) -> u64 {
        self.h2d_by_label.get(&label).copied().unwrap_or(0)
    }

    pub fn d2h_for(&self, label: Category) -> u64 {
        self.d2h_by_label.get(&label).copied().unwrap_or(0)
    }
}
