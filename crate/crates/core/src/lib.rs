pub mod asm;
pub mod harness;
pub mod isa;
pub mod machine;
pub mod memory;
pub mod mpu;
pub mod nvic;
pub mod trace;
