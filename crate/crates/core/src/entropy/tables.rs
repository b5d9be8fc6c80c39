//! Quantised CDF tables for zero-mean discretised Gaussians.

use std::sync::OnceLock;

use super::range::PROB_TOTAL;
use super::{gaussian_pmf, SIGMA_MIN};

pub const ALPHABET_MIN: i32 = -127;
pub const ALPHABET_MAX: i32 = 128;
/// Index of the escape entry, after the 256 in-range symbols.
pub const ESCAPE: usize = (ALPHABET_MAX - ALPHABET_MIN + 1) as usize;
const ENTRIES: usize = ESCAPE + 1;

pub const NUM_SCALES: usize = 160;
pub const SCALE_MAX: f64 = 256.0;

/// Cumulative frequencies summing to [`PROB_TOTAL`], every entry at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Table for `N(0, sigma^2)` discretised to unit bins.
    pub fn for_scale(sigma: f64) -> Self {
        let budget = (PROB_TOTAL as usize - ENTRIES) as f64;
        let mut freq = vec![0u32; ENTRIES];
        let mut inside = 0.0;
        for (i, f) in freq.iter_mut().take(ESCAPE).enumerate() {
            let p = gaussian_pmf(i as f64 + ALPHABET_MIN as f64, 0.0, sigma);
            inside += p;
            *f = 1 + (p * budget).round() as u32;
        }
        freq[ESCAPE] = 1 + ((1.0 - inside).max(0.0) * budget).round() as u32;

        let total: i64 = freq.iter().map(|&f| f as i64).sum();
        let diff = PROB_TOTAL as i64 - total;
        let largest = (0..ENTRIES).max_by_key(|&i| (freq[i], std::cmp::Reverse(i))).unwrap_or(0);
        let adjusted = freq[largest] as i64 + diff;
        assert!(adjusted >= 1, "cdf renormalisation underflow");
        freq[largest] = adjusted as u32;

        let mut cdf = Vec::with_capacity(ENTRIES + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        Self { cdf }
    }

    /// Number of entries (in-range symbols plus escape).
    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cdf(&self, idx: usize) -> u32 {
        self.cdf[idx]
    }

    pub fn freq(&self, idx: usize) -> u32 {
        self.cdf[idx + 1] - self.cdf[idx]
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cdf
    }

    /// Entry whose interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

/// Log-spaced scale levels in `[SIGMA_MIN, SCALE_MAX]` with one table each.
pub struct ScaleTable {
    levels: Vec<f64>,
    bounds: Vec<f64>,
    tables: Vec<CdfTable>,
}

impl ScaleTable {
    fn build() -> Self {
        let lo = libm::log(SIGMA_MIN);
        let hi = libm::log(SCALE_MAX);
        let step = (hi - lo) / (NUM_SCALES - 1) as f64;
        let levels: Vec<f64> = (0..NUM_SCALES).map(|i| libm::exp(lo + step * i as f64)).collect();
        let bounds = (0..NUM_SCALES - 1)
            .map(|i| libm::exp(lo + step * (i as f64 + 0.5)))
            .collect();
        let tables = levels.iter().map(|&s| CdfTable::for_scale(s)).collect();
        Self {
            levels,
            bounds,
            tables,
        }
    }

    /// Process-wide instance, built on first use.
    pub fn get() -> &'static ScaleTable {
        static TABLE: OnceLock<ScaleTable> = OnceLock::new();
        TABLE.get_or_init(Self::build)
    }

    /// Level closest to `sigma` on a log scale; NaN maps to the widest.
    pub fn index(&self, sigma: f64) -> usize {
        if sigma.is_nan() {
            return NUM_SCALES - 1;
        }
        self.bounds.partition_point(|&b| b < sigma)
    }

    pub fn level(&self, idx: usize) -> f64 {
        self.levels[idx]
    }

    pub fn table(&self, idx: usize) -> &CdfTable {
        &self.tables[idx]
    }

    pub fn table_for(&self, sigma: f64) -> &CdfTable {
        self.table(self.index(sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_valid() {
        let st = ScaleTable::get();
        for i in 0..NUM_SCALES {
            let t = st.table(i);
            let c = t.cumulative();
            assert_eq!(c[0], 0);
            assert_eq!(*c.last().unwrap(), PROB_TOTAL);
            assert!(c.windows(2).all(|w| w[1] > w[0]), "level {i}");
            assert_eq!(t.len(), 257);
        }
    }

    #[test]
    fn narrow_table_puts_almost_everything_on_zero() {
        let t = CdfTable::for_scale(SIGMA_MIN);
        let zero = (0 - ALPHABET_MIN) as usize;
        assert!(t.freq(zero) > PROB_TOTAL - 300);
        assert_eq!(t.freq(ESCAPE), 1);
    }

    #[test]
    fn index_picks_nearest_level() {
        let st = ScaleTable::get();
        assert_eq!(st.index(0.0), 0);
        assert_eq!(st.index(SIGMA_MIN), 0);
        assert_eq!(st.index(1e9), NUM_SCALES - 1);
        for i in 0..NUM_SCALES {
            assert_eq!(st.index(st.level(i)), i);
        }
        assert!((st.level(NUM_SCALES - 1) - SCALE_MAX).abs() < 1e-9);
    }

    #[test]
    fn lookup_inverts_cdf() {
        let t = CdfTable::for_scale(3.0);
        for idx in 0..t.len() {
            assert_eq!(t.lookup(t.cdf(idx)), idx);
            assert_eq!(t.lookup(t.cdf(idx + 1) - 1), idx);
        }
    }
}
