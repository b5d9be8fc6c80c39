//! Discretised Gaussian likelihoods, rate in bits per pixel, and the
//! lossless coding layer (CDF tables, range coder, container format).

mod bitstream;
mod range;
mod tables;

pub use bitstream::{read_varint, write_varint, Bitstream, Header, MAGIC, NUM_STREAMS, VERSION};
pub use range::{RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};
pub use tables::{CdfTable, ScaleTable, ALPHABET_MAX, ALPHABET_MIN, ESCAPE, NUM_SCALES, SCALE_MAX};

use crate::autograd::{normal_cdf, Var};
use crate::tensor::{Real, Tensor};

/// Lower bound on every predicted scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Floor applied to likelihoods before taking logs in the rate term.
pub const LIKELIHOOD_MIN: f64 = 1e-9;

/// Probability mass of the unit interval around `value` under
/// `N(mu, sigma^2)`; evaluated on `|value - mu|` so that the upper tail
/// does not cancel.
pub fn gaussian_pmf(value: f64, mu: f64, sigma: f64) -> f64 {
    let a = (value - mu).abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// Elementwise [`gaussian_pmf`] on the graph, broadcasting `mu` and
/// `sigma` against `y`. No floor is applied.
pub fn gaussian_likelihood<'g, T: Real>(y: Var<'g, T>, mu: Var<'g, T>, sigma: Var<'g, T>) -> Var<'g, T> {
    let a = (y - mu).abs();
    let upper = (-a).add_scalar(T::c(0.5)) / sigma;
    let lower = (-a).add_scalar(T::c(-0.5)) / sigma;
    upper.normal_cdf() - lower.normal_cdf()
}

/// `sum(-log2(max(p, LIKELIHOOD_MIN)))` on the graph.
pub fn rate_bits<'g, T: Real>(likelihoods: Var<'g, T>) -> Var<'g, T> {
    likelihoods
        .clamp_min(T::c(LIKELIHOOD_MIN))
        .ln()
        .sum()
        .mul_scalar(T::c(-std::f64::consts::LOG2_E))
}

/// Bits per pixel of both latents, from their likelihoods.
pub fn rate_bpp<T: Real>(likelihoods_y: &Tensor<T>, likelihoods_z: &Tensor<T>, num_pixels: usize) -> f64 {
    let bits = |t: &Tensor<T>| {
        t.data()
            .iter()
            .map(|&p| -p.f64().max(LIKELIHOOD_MIN).log2())
            .sum::<f64>()
    };
    (bits(likelihoods_y) + bits(likelihoods_z)) / num_pixels as f64
}

/// Encode one integer symbol under a table, escaping values outside the
/// alphabet with a sign bit and an Elias-gamma magnitude.
pub fn encode_symbol(enc: &mut RangeEncoder, table: &CdfTable, symbol: i32) {
    if (ALPHABET_MIN..=ALPHABET_MAX).contains(&symbol) {
        enc.encode(table.cdf(symbol_index(symbol)), table.freq(symbol_index(symbol)));
        return;
    }
    enc.encode(table.cdf(ESCAPE), table.freq(ESCAPE));
    let (negative, magnitude) = if symbol < ALPHABET_MIN {
        (true, (ALPHABET_MIN as i64 - symbol as i64) as u64)
    } else {
        (false, (symbol as i64 - ALPHABET_MAX as i64) as u64)
    };
    enc.encode_bit(negative);
    let n = 63 - magnitude.leading_zeros();
    for _ in 0..n {
        enc.encode_bit(false);
    }
    for b in (0..=n).rev() {
        enc.encode_bit((magnitude >> b) & 1 == 1);
    }
}

/// Inverse of [`encode_symbol`].
pub fn decode_symbol(dec: &mut RangeDecoder<'_>, table: &CdfTable) -> Result<i32, crate::error::BitstreamError> {
    use crate::error::BitstreamError;
    let target = dec.target();
    let idx = table.lookup(target);
    dec.consume(table.cdf(idx), table.freq(idx))?;
    if idx != ESCAPE {
        return Ok(idx as i32 + ALPHABET_MIN);
    }
    let negative = dec.decode_bit()?;
    let mut n = 0;
    while !dec.decode_bit()? {
        n += 1;
        if n > 32 {
            return Err(BitstreamError::Corrupt("escape magnitude too long"));
        }
    }
    let mut magnitude: u64 = 1;
    for _ in 0..n {
        magnitude = (magnitude << 1) | dec.decode_bit()? as u64;
    }
    let value = if negative {
        ALPHABET_MIN as i64 - magnitude as i64
    } else {
        ALPHABET_MAX as i64 + magnitude as i64
    };
    i32::try_from(value).map_err(|_| BitstreamError::Corrupt("escaped symbol out of range"))
}

/// Exact cost in bits of [`encode_symbol`] under the table.
pub fn symbol_cost_bits(table: &CdfTable, symbol: i32) -> f64 {
    let cost = |idx: usize| -(table.freq(idx) as f64 / PROB_TOTAL as f64).log2();
    if (ALPHABET_MIN..=ALPHABET_MAX).contains(&symbol) {
        return cost(symbol_index(symbol));
    }
    let magnitude = if symbol < ALPHABET_MIN {
        (ALPHABET_MIN as i64 - symbol as i64) as u64
    } else {
        (symbol as i64 - ALPHABET_MAX as i64) as u64
    };
    let n = 63 - magnitude.leading_zeros() as u64;
    cost(ESCAPE) + 1.0 + (2 * n + 1) as f64
}

fn symbol_index(symbol: i32) -> usize {
    (symbol - ALPHABET_MIN) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use proptest::prelude::*;

    #[test]
    fn pmf_centre_and_normalisation() {
        // Phi(0.5) - Phi(-0.5) = erf(0.5 / sqrt 2), from a 30-digit evaluation
        assert!((gaussian_pmf(0.0, 0.0, 1.0) - 0.382_924_922_548_026).abs() < 1e-14);
        let total: f64 = (-30..=30).map(|d| gaussian_pmf(d as f64, 0.0, 1.0)).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn graph_likelihood_matches_scalar() {
        let g = Graph::<f64>::new();
        let y = g.constant(Tensor::from_vec(&[4], vec![0.0, 1.0, -3.0, 2.25]));
        let mu = g.constant(Tensor::from_vec(&[4], vec![0.0, 0.2, 0.0, -1.0]));
        let s = g.constant(Tensor::from_vec(&[4], vec![1.0, 0.5, 0.11, 3.0]));
        let p = gaussian_likelihood(y, mu, s).value();
        for i in 0..4 {
            let want = gaussian_pmf(y.value().data()[i], mu.value().data()[i], s.value().data()[i]);
            assert!((p.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn likelihood_gradient() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let y = Tensor::<f64>::rand_uniform(&[12], -3.0, 3.0, &mut rng);
        let mu = Tensor::rand_uniform(&[12], -0.4, 0.4, &mut rng);
        let s = Tensor::rand_uniform(&[12], 0.3, 2.0, &mut rng);
        let err = crate::autograd::gradcheck::check(&[y, mu, s], 1e-6, |_, v| {
            rate_bits(gaussian_likelihood(v[0], v[1], v[2]))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bpp_examples() {
        let empty = Tensor::<f64>::zeros(&[0]);
        assert_eq!(rate_bpp(&Tensor::from_vec(&[1], vec![0.5]), &empty, 1), 1.0);
        assert_eq!(rate_bpp(&Tensor::full(&[64], 1.0 / 256.0), &empty, 64), 8.0);
        let p = Tensor::<f64>::full(&[10], 0.3);
        let half = p.map(|v| v / 2.0);
        let d = rate_bpp(&half, &empty, 5) - rate_bpp(&p, &empty, 5);
        assert!((d - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pmf_is_symmetric(k in 0i32..40, mu in -5.0f64..5.0, sigma in 0.11f64..50.0) {
            let a = gaussian_pmf(mu + k as f64, mu, sigma);
            let b = gaussian_pmf(mu - k as f64, mu, sigma);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
            prop_assert!((0.0..1.0).contains(&a));
        }

        #[test]
        fn symbols_round_trip(symbols in proptest::collection::vec(-100_000i32..100_000, 0..64), level in 0usize..NUM_SCALES) {
            let table = ScaleTable::get().table(level);
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                encode_symbol(&mut enc, table, s);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &s in &symbols {
                prop_assert_eq!(decode_symbol(&mut dec, table).unwrap(), s);
            }
            prop_assert!(dec.finish().is_ok());
        }
    }
}
