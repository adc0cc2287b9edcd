// Saturated softmax units produce probabilities near exp(-700). Their products
// in matrix kernels and backpropagation fall into the subnormal range, which
// the hardware handles orders of magnitude slower. Flushing them to zero makes
// training cost independent of how saturated the model is.

/// Turns on flush-to-zero and denormals-are-zero for the calling thread.
/// Returns false on targets where the mode is not available.
pub fn flush_denormals() -> bool {
    imp::flush_denormals()
}

/// Whether the calling thread currently flushes subnormal results to zero.
pub fn flushing_denormals() -> bool {
    imp::flushing_denormals()
}

/// Flushes on the calling thread and installs a global rayon pool whose
/// workers flush too. `threads = 0` keeps rayon's default size. Returns false
/// if a global pool already existed.
pub fn install_flushing_pool(threads: usize) -> bool {
    flush_denormals();
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .start_handler(|_| {
            flush_denormals();
        })
        .build_global()
        .is_ok()
}

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    fn read() -> u32 {
        let mut csr = 0u32;
        // SAFETY: stmxcsr stores the SSE control register into the given location
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
        csr
    }

    pub fn flush_denormals() -> bool {
        let csr = read() | FTZ | DAZ;
        // SAFETY: only the FTZ and DAZ mode bits change
        unsafe { asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly)) };
        true
    }

    pub fn flushing_denormals() -> bool {
        read() & (FTZ | DAZ) == FTZ | DAZ
    }
}

#[cfg(target_arch = "aarch64")]
mod imp {
    use std::arch::asm;

    const FZ: u64 = 1 << 24;

    fn read() -> u64 {
        let fpcr: u64;
        // SAFETY: reading FPCR has no side effects
        unsafe { asm!("mrs {}, fpcr", out(reg) fpcr, options(nomem, nostack)) };
        fpcr
    }

    pub fn flush_denormals() -> bool {
        let fpcr = read() | FZ;
        // SAFETY: only the flush-to-zero mode bit changes
        unsafe { asm!("msr fpcr, {}", in(reg) fpcr, options(nomem, nostack)) };
        true
    }

    pub fn flushing_denormals() -> bool {
        read() & FZ != 0
    }
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
mod imp {
    pub fn flush_denormals() -> bool {
        false
    }

    pub fn flushing_denormals() -> bool {
        false
    }
}
