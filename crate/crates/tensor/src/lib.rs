//! A small reverse-mode autograd engine for CPU training of voxel models.
//!
//! Values are dense `f32` [`Tensor`]s. A [`Tape`] records operations applied
//! to [`Var`] handles; [`Tape::backward`] returns gradients for the leaves.
//! Model parameters live in a [`ParamStore`] and are bound to a tape through
//! a [`Ctx`] for each pass.

pub mod archive;
pub mod gemm;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use archive::{Archive, ArchiveError};
pub use ops::ConvGeom;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Ctx, Init, ParamCounter, ParamId, ParamSink, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Makes the calling thread flush subnormal floats to zero.
///
/// Subnormal operands slow arithmetic down by an order of magnitude on common
/// CPUs, and late in training many gradients and optimizer moments are that
/// small. Results are deterministic either way.
pub fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only sets the FTZ and DAZ bits of this thread's MXCSR.
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack));
    }
    #[cfg(target_arch = "aarch64")]
    // SAFETY: only sets the FZ bit of this thread's FPCR.
    unsafe {
        let mut fpcr: u64;
        std::arch::asm!("mrs {}, fpcr", out(reg) fpcr, options(nomem, nostack));
        fpcr |= 1 << 24;
        std::arch::asm!("msr fpcr, {}", in(reg) fpcr, options(nomem, nostack));
    }
}
