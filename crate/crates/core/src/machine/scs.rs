//! Memory-mapped system control registers. Only privileged code may
//! access them; registers are word-sized except the per-line priority
//! bytes.

use super::{CpuFault, FaultKind, Machine};
use crate::isa::MemSize;
use crate::mpu::{AccessKind, MpuRegion};

pub const SCS_BASE: u32 = 0xE000_E000;
pub const SCS_END: u32 = 0xE000_F000;

/// Set-enable bitmaps, one word per 32 lines.
pub const ISER: u32 = 0xE000_E100;
pub const ICER: u32 = 0xE000_E180;
pub const ISPR: u32 = 0xE000_E200;
pub const ICPR: u32 = 0xE000_E280;
/// One priority byte per line.
pub const IPR: u32 = 0xE000_E400;
pub const FAULT_STATUS: u32 = 0xE000_ED28;
pub const FAULT_ADDRESS: u32 = 0xE000_ED34;
/// Bit 0 enable, bit 2 privileged background map.
pub const MPU_CTRL: u32 = 0xE000_ED94;
pub const MPU_RNR: u32 = 0xE000_ED98;
pub const MPU_RBAR: u32 = 0xE000_ED9C;
/// Writing the attribute register commits the selected region.
pub const MPU_RASR: u32 = 0xE000_EDA0;
/// Bit 0 masks every line except NMI lines.
pub const PRIMASK: u32 = 0xE000_EF00;
/// Bit 0 drops thread-mode privilege.
pub const CONTROL: u32 = 0xE000_EF04;

const BANK_WORDS: u32 = 8;

pub fn is_scs(addr: u32) -> bool {
    (SCS_BASE..SCS_END).contains(&addr)
}

fn bank(addr: u32, base: u32) -> Option<usize> {
    (addr >= base && addr < base + 4 * BANK_WORDS).then(|| ((addr - base) / 4) as usize)
}

impl Machine {
    fn scs_fault(addr: u32, kind: FaultKind, access: AccessKind) -> CpuFault {
        CpuFault {
            kind,
            address: addr,
            access: Some(access),
        }
    }

    fn ipr_range(&self, addr: u32) -> bool {
        addr >= IPR && addr < IPR + self.nvic.line_count() as u32
    }

    pub(super) fn scs_read(
        &mut self,
        addr: u32,
        size: MemSize,
        privileged: bool,
    ) -> Result<u32, CpuFault> {
        let fault = |k| Self::scs_fault(addr, k, AccessKind::Read);
        if !privileged {
            return Err(fault(FaultKind::ScsPrivilege));
        }
        if self.ipr_range(addr) {
            let mut v = 0;
            for i in 0..size.bytes() {
                let line = (addr + i - IPR) as usize;
                let p = self.nvic.line(line).map_or(0, |l| l.priority as u32);
                v |= p << (8 * i);
            }
            return Ok(v);
        }
        if size != MemSize::Word || !addr.is_multiple_of(4) {
            return Err(fault(FaultKind::Unaligned));
        }
        let n = &self.nvic;
        let v = if let Some(w) = bank(addr, ISER).or(bank(addr, ICER)) {
            n.bitmap(w, |l| l.enabled)
        } else if let Some(w) = bank(addr, ISPR).or(bank(addr, ICPR)) {
            n.bitmap(w, |l| l.pending)
        } else {
            match addr {
                FAULT_STATUS => self.fault_status,
                FAULT_ADDRESS => self.fault_address,
                MPU_CTRL => {
                    self.mpu.enabled as u32 | (self.mpu.background_privileged_allowed as u32) << 2
                }
                MPU_RNR => self.mpu_latch.rnr,
                MPU_RBAR => self.mpu_latch.rbar,
                MPU_RASR => self
                    .mpu
                    .regions
                    .get(self.mpu_latch.rnr as usize)
                    .and_then(|r| r.as_ref())
                    .map_or(0, |r| r.attr_bits()),
                PRIMASK => self.cpu.primask as u32,
                CONTROL => self.cpu.npriv as u32,
                _ => return Err(fault(FaultKind::Unmapped)),
            }
        };
        Ok(v)
    }

    pub(super) fn scs_write(
        &mut self,
        addr: u32,
        size: MemSize,
        value: u32,
        privileged: bool,
    ) -> Result<(), CpuFault> {
        let fault = |k| Self::scs_fault(addr, k, AccessKind::Write);
        if !privileged {
            return Err(fault(FaultKind::ScsPrivilege));
        }
        if self.ipr_range(addr) {
            for i in 0..size.bytes() {
                let line = (addr + i - IPR) as usize;
                let _ = self.nvic.set_priority(line, (value >> (8 * i)) as u8);
            }
            return Ok(());
        }
        if size != MemSize::Word || !addr.is_multiple_of(4) {
            return Err(fault(FaultKind::Unaligned));
        }
        let lines_in = |w: usize| {
            (0..32)
                .filter(move |i| value & (1 << i) != 0)
                .map(move |i| w * 32 + i)
        };
        if let Some(w) = bank(addr, ISER) {
            for l in lines_in(w) {
                let _ = self.nvic.set_enabled(l, true);
            }
        } else if let Some(w) = bank(addr, ICER) {
            for l in lines_in(w) {
                let _ = self.nvic.set_enabled(l, false);
            }
        } else if let Some(w) = bank(addr, ISPR) {
            for l in lines_in(w) {
                self.pend(l);
            }
        } else if let Some(w) = bank(addr, ICPR) {
            for l in lines_in(w) {
                let _ = self.nvic.unpend(l);
            }
        } else {
            match addr {
                FAULT_STATUS => self.fault_status &= !value,
                FAULT_ADDRESS => self.fault_address = value,
                MPU_CTRL => {
                    self.mpu.enabled = value & 1 != 0;
                    self.mpu.background_privileged_allowed = value & 4 != 0;
                }
                MPU_RNR => self.mpu_latch.rnr = value,
                MPU_RBAR => self.mpu_latch.rbar = value,
                MPU_RASR => {
                    let region = (value & 1 != 0)
                        .then(|| MpuRegion::from_registers(self.mpu_latch.rbar, value));
                    self.mpu
                        .configure_region(self.mpu_latch.rnr as usize, region, true)
                        .map_err(|_| fault(FaultKind::ScsConfig))?;
                }
                PRIMASK => self.cpu.primask = value & 1 != 0,
                CONTROL => self.cpu.npriv = value & 1 != 0,
                _ => return Err(fault(FaultKind::Unmapped)),
            }
        }
        Ok(())
    }
}
