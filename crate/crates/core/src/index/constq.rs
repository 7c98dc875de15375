//! 256-level uniform scalar quantizer for the per-point query-independent
//! distance term.

/// Percentiles used as the quantizer range.
const LOWER_PERCENTILE: f64 = 0.001;
const UPPER_PERCENTILE: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstQuantizer {
    lo: f32,
    hi: f32,
}

impl ConstQuantizer {
    pub fn new(lo: f32, hi: f32) -> Self {
        debug_assert!(lo <= hi);
        Self { lo, hi }
    }

    /// Fits the range to the 0.1% / 99.9% percentiles of `values`.
    pub fn train(values: &[f32]) -> Self {
        if values.is_empty() {
            return Self::new(0.0, 0.0);
        }
        let mut sorted: Vec<f32> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Self::new(0.0, 0.0);
        }
        sorted.sort_unstable_by(f32::total_cmp);
        let last = (sorted.len() - 1) as f64;
        let lo = sorted[(LOWER_PERCENTILE * last).floor() as usize];
        let hi = sorted[(UPPER_PERCENTILE * last).ceil() as usize];
        Self::new(lo, hi)
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    pub fn bucket_width(&self) -> f32 {
        (self.hi - self.lo) / 256.0
    }

    pub fn in_range(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Bucket index, clamping values outside the range.
    pub fn quantize(&self, v: f32) -> u8 {
        let w = self.bucket_width();
        if !(w > 0.0) {
            return 0;
        }
        let b = ((v - self.lo) / w).floor();
        b.clamp(0.0, 255.0) as u8
    }

    /// Bucket midpoint.
    pub fn dequantize(&self, b: u8) -> f32 {
        self.lo + (b as f32 + 0.5) * self.bucket_width()
    }

    /// All 256 dequantized values.
    pub fn table(&self) -> [f32; 256] {
        let mut t = [0.0f32; 256];
        for (b, v) in t.iter_mut().enumerate() {
            *v = self.dequantize(b as u8);
        }
        t
    }
}
