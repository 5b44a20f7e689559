//! Flush-to-zero mode for subnormal floats, scoped to the current thread.
//! A well-fitted network produces many of them (saturated softmax tails,
//! decaying optimizer moments) and x86 handles them very slowly.

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
mod imp {
    use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};

    const FLUSH_TO_ZERO: u32 = 1 << 15;
    const DENORMALS_ARE_ZERO: u32 = 1 << 6;

    pub struct FlushSubnormals {
        saved: u32,
    }

    impl FlushSubnormals {
        pub fn new() -> Self {
            // SAFETY: SSE is part of the x86_64 baseline; only the two
            // subnormal bits of the control register change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | FLUSH_TO_ZERO | DENORMALS_ARE_ZERO) };
            Self { saved }
        }
    }

    impl Drop for FlushSubnormals {
        fn drop(&mut self) {
            // SAFETY: restores the value read in `new`.
            unsafe { _mm_setcsr(self.saved) };
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub struct FlushSubnormals;

    impl FlushSubnormals {
        pub fn new() -> Self {
            Self
        }
    }
}

pub(crate) use imp::FlushSubnormals;

#[cfg(all(test, target_arch = "x86_64"))]
mod tests {
    use super::*;

    #[test]
    fn flushes_inside_scope_only() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        {
            let _guard = FlushSubnormals::new();
            assert_eq!(std::hint::black_box(tiny) / 4.0, 0.0);
        }
        assert!(std::hint::black_box(tiny) / 4.0 > 0.0);
    }
}
