//! Allocator tuning for large short-lived buffers.
//!
//! Activations of a training batch are several megabytes each and are
//! allocated and freed many times per step. glibc serves such blocks with
//! fresh `mmap` regions by default, so every reuse pays a page fault per 4 KiB.
//! Raising the mmap and trim thresholds keeps them on the heap instead.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Applies the tuning once per process. A no-op off glibc.
pub fn retain_freed_memory() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
