//! Binary extension fields GF(2^8) and GF(2^16) via log/antilog tables.

use std::sync::OnceLock;

/// A binary extension field with `2^bits` elements; symbols are stored in `u16`.
#[derive(Debug)]
pub struct GaloisField {
    bits: u8,
    order: u32,
    exp: Vec<u16>,
    log: Vec<u32>,
}

// x^8 + x^4 + x^3 + x^2 + 1
const POLY_8: u32 = 0x11d;
// x^16 + x^12 + x^3 + x + 1
const POLY_16: u32 = 0x1100b;

impl GaloisField {
    fn build(bits: u8, poly: u32) -> Self {
        let size = 1u32 << bits;
        let order = size - 1;
        let mut exp = vec![0u16; 2 * order as usize];
        let mut log = vec![0u32; size as usize];
        let mut x: u32 = 1;
        for i in 0..order {
            exp[i as usize] = x as u16;
            log[x as usize] = i;
            x <<= 1;
            if x & size != 0 {
                x ^= poly;
            }
        }
        assert_eq!(x, 1, "polynomial is not primitive");
        for i in order..2 * order {
            exp[i as usize] = exp[(i - order) as usize];
        }
        GaloisField {
            bits,
            order,
            exp,
            log,
        }
    }

    pub fn gf8() -> &'static GaloisField {
        static F: OnceLock<GaloisField> = OnceLock::new();
        F.get_or_init(|| Self::build(8, POLY_8))
    }

    pub fn gf16() -> &'static GaloisField {
        static F: OnceLock<GaloisField> = OnceLock::new();
        F.get_or_init(|| Self::build(16, POLY_16))
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Number of field elements.
    pub fn size(&self) -> u32 {
        self.order + 1
    }

    #[inline]
    pub fn add(&self, a: u16, b: u16) -> u16 {
        a ^ b
    }

    #[inline]
    pub fn mul(&self, a: u16, b: u16) -> u16 {
        if a == 0 || b == 0 {
            return 0;
        }
        self.exp[(self.log[a as usize] + self.log[b as usize]) as usize]
    }

    /// Discrete log of a non-zero element.
    #[inline]
    pub fn log(&self, a: u16) -> u32 {
        debug_assert!(a != 0);
        self.log[a as usize]
    }

    /// Multiplies `x` by the element whose log is `log_c`.
    #[inline]
    pub fn mul_by_log(&self, log_c: u32, x: u16) -> u16 {
        if x == 0 {
            0
        } else {
            self.exp[(log_c + self.log[x as usize]) as usize]
        }
    }

    pub fn inv(&self, a: u16) -> u16 {
        assert!(a != 0, "zero has no inverse");
        self.exp[((self.order - self.log[a as usize]) % self.order) as usize]
    }

    pub fn div(&self, a: u16, b: u16) -> u16 {
        self.mul(a, self.inv(b))
    }
}
