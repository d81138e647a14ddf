//! Byte accounting for an assembled image.

use serde::{Deserialize, Serialize};

use super::ProgramImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSizeReport {
    pub instructions_16: u32,
    pub instructions_32: u32,
    pub instruction_bytes: u32,
    pub pool_bytes: u32,
    /// Data words, jump tables and alignment padding.
    pub data_bytes: u32,
    pub total_bytes: u32,
    /// The size if every instruction took 32 bits.
    pub all_32_bit_bytes: u32,
    /// `total_bytes / all_32_bit_bytes`.
    pub ratio: f64,
}

impl CodeSizeReport {
    pub fn of(image: &ProgramImage) -> CodeSizeReport {
        let n16 = image
            .instructions
            .iter()
            .filter(|r| r.width_bits == 16)
            .count() as u32;
        let n32 = image.instructions.len() as u32 - n16;
        let instruction_bytes = 2 * n16 + 4 * n32;
        let pool_bytes = image.pool_bytes();
        let total_bytes = instruction_bytes + pool_bytes + image.data_bytes;
        let all_32_bit_bytes = 4 * (n16 + n32) + pool_bytes + image.data_bytes;
        CodeSizeReport {
            instructions_16: n16,
            instructions_32: n32,
            instruction_bytes,
            pool_bytes,
            data_bytes: image.data_bytes,
            total_bytes,
            all_32_bit_bytes,
            ratio: if all_32_bit_bytes == 0 {
                1.0
            } else {
                total_bytes as f64 / all_32_bit_bytes as f64
            },
        }
    }
}
