//! Load/store-bound kernels: `a[i] = b[i] op c[i]` over L1-resident arrays,
//! one 256-bit load per source, one store per result.

use std::arch::x86_64::*;
use std::hint::black_box;

use crate::cycleclock::{read_end, read_start};

/// 32-byte aligned group of four doubles.
#[derive(Debug, Clone, Copy, Default)]
#[repr(C, align(32))]
pub struct Block(pub [f64; 4]);

/// Aligned array whose length is a multiple of four.
#[derive(Debug, Clone)]
pub struct AlignedArray {
    blocks: Vec<Block>,
}

impl AlignedArray {
    /// `values.len()` must be a multiple of four.
    pub fn from_slice(values: &[f64]) -> Self {
        assert_eq!(values.len() % 4, 0);
        let blocks = values
            .chunks_exact(4)
            .map(|c| Block([c[0], c[1], c[2], c[3]]))
            .collect();
        AlignedArray { blocks }
    }

    pub fn zeroed(len: usize) -> Self {
        assert_eq!(len % 4, 0);
        AlignedArray {
            blocks: vec![Block::default(); len / 4],
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len() * 4
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn as_ptr(&self) -> *const f64 {
        self.blocks.as_ptr().cast()
    }

    pub fn as_mut_ptr(&mut self) -> *mut f64 {
        self.blocks.as_mut_ptr().cast()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.0).collect()
    }
}

macro_rules! memc_binary {
    ($name:ident, $intrinsic:ident) => {
        /// # Safety
        /// Pointers must be 32-byte aligned and valid for `n` doubles,
        /// `n % 4 == 0`, and the CPU must support AVX.
        #[target_feature(enable = "avx")]
        pub unsafe fn $name(a: *mut f64, b: *const f64, c: *const f64, _d: *const f64, n: usize, reps: u64) -> u64 {
            let start = read_start();
            for _ in 0..reps {
                // hide the pointers so repetitions cannot be merged
                let (a, b, c) = (black_box(a), black_box(b), black_box(c));
                let mut i = 0;
                while i < n {
                    let x = _mm256_load_pd(b.add(i));
                    let y = _mm256_load_pd(c.add(i));
                    _mm256_store_pd(a.add(i), $intrinsic(x, y));
                    i += 4;
                }
            }
            read_end().wrapping_sub(start)
        }
    };
}

memc_binary!(add, _mm256_add_pd);
memc_binary!(mul, _mm256_mul_pd);
memc_binary!(div, _mm256_div_pd);

/// `a[i] = b[i] * c[i] + d[i]`.
///
/// # Safety
/// As for the binary kernels, plus FMA3 support.
#[target_feature(enable = "avx,fma")]
pub unsafe fn fma(a: *mut f64, b: *const f64, c: *const f64, d: *const f64, n: usize, reps: u64) -> u64 {
    let start = read_start();
    for _ in 0..reps {
        let (a, b, c, d) = (black_box(a), black_box(b), black_box(c), black_box(d));
        let mut i = 0;
        while i < n {
            let x = _mm256_load_pd(b.add(i));
            let y = _mm256_load_pd(c.add(i));
            let z = _mm256_load_pd(d.add(i));
            _mm256_store_pd(a.add(i), _mm256_fmadd_pd(x, y, z));
            i += 4;
        }
    }
    read_end().wrapping_sub(start)
}

pub type MemKernelFn = unsafe fn(*mut f64, *const f64, *const f64, *const f64, usize, u64) -> u64;
