//! Seeded randomness: per-item request renewal streams and the lazily sampled
//! backend version counters.
//!
//! Every `(master seed, item, purpose)` triple maps to its own ChaCha8 stream
//! (the seed selects the key, the pair selects the stream id), so draws for
//! one item never shift the samples of another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};

use crate::domain::ArrivalLaw;
use crate::error::{Error, Result};

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Arrivals = 0,
    Versions = 1,
    /// Randomness owned by a caching policy (exploration).
    Policy = 2,
}

/// An independent random stream for one `(item, purpose)` pair.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(master_seed: u64, item: Option<usize>, purpose: StreamPurpose) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        let slot = item.map_or(0, |i| i as u64 + 1);
        rng.set_stream((slot << 4) | purpose as u64);
        RngStream(rng)
    }

    pub fn for_item(master_seed: u64, item: usize, purpose: StreamPurpose) -> Self {
        Self::new(master_seed, Some(item), purpose)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Draws the time until the next request of an item with mean rate
/// `item_rate`.
///
/// The Poisson law and `GammaRenewal { omega: 1 }` use the same exponential
/// sampler, so they produce identical sequences.
pub fn next_interarrival(
    stream: &mut RngStream,
    law: ArrivalLaw,
    item_rate: f64,
) -> Result<f64> {
    if !(item_rate > 0.0) || !item_rate.is_finite() {
        return Err(Error::invalid(format!(
            "item request rate must be positive, got {item_rate}"
        )));
    }
    let shape = law.shape();
    let sample = if shape == 1.0 {
        Exp::new(item_rate)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(stream)
    } else {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::invalid(format!("gamma shape must be positive, got {shape}")));
        }
        Gamma::new(shape, 1.0 / (shape * item_rate))
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(stream)
    };
    // Very small shapes underflow to 0; the renewal law needs gaps > 0.
    Ok(sample.max(f64::MIN_POSITIVE))
}

/// Backend version counter of one item, advanced lazily at observation
/// instants.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VersionClock {
    pub backend_version: u64,
    pub last_advanced_at: f64,
}

impl VersionClock {
    pub fn starting_at(time: f64) -> Self {
        VersionClock {
            backend_version: 0,
            last_advanced_at: time,
        }
    }

    /// Adds a Poisson(`refresh_rate * (to_time - last_advanced_at)`) number
    /// of updates and moves the clock to `to_time`.
    pub fn advance(
        &mut self,
        to_time: f64,
        refresh_rate: f64,
        stream: &mut RngStream,
    ) -> Result<u64> {
        if to_time < self.last_advanced_at {
            return Err(Error::invalid(format!(
                "cannot advance version clock backwards from {} to {to_time}",
                self.last_advanced_at
            )));
        }
        if !(refresh_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "refresh rate must be >= 0, got {refresh_rate}"
            )));
        }
        let mean = refresh_rate * (to_time - self.last_advanced_at);
        if mean > 0.0 {
            let draw: f64 = Poisson::new(mean)
                .map_err(|e| Error::invalid(e.to_string()))?
                .sample(stream);
            self.backend_version += draw as u64;
        }
        self.last_advanced_at = to_time;
        Ok(self.backend_version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::for_item(11, 3, StreamPurpose::Arrivals);
        let mut b = RngStream::for_item(11, 3, StreamPurpose::Arrivals);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = RngStream::for_item(11, 3, StreamPurpose::Arrivals);
        let mut b = RngStream::for_item(11, 4, StreamPurpose::Arrivals);
        let mut c = RngStream::for_item(11, 3, StreamPurpose::Versions);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }

    #[test]
    fn stream_independence_under_consumption() {
        // Draining item 0's stream must not perturb item 1's samples.
        let mut j_ref = RngStream::for_item(5, 1, StreamPurpose::Arrivals);
        let reference: Vec<u64> = (0..10).map(|_| j_ref.next_u64()).collect();
        let mut k = RngStream::for_item(5, 0, StreamPurpose::Arrivals);
        for _ in 0..1000 {
            k.next_u64();
        }
        let mut j = RngStream::for_item(5, 1, StreamPurpose::Arrivals);
        let again: Vec<u64> = (0..10).map(|_| j.next_u64()).collect();
        assert_eq!(reference, again);
    }

    #[test]
    fn rejects_nonpositive_rate() {
        let mut s = RngStream::for_item(1, 0, StreamPurpose::Arrivals);
        assert!(next_interarrival(&mut s, ArrivalLaw::PoissonProcess, 0.0).is_err());
        assert!(next_interarrival(&mut s, ArrivalLaw::PoissonProcess, -2.0).is_err());
    }

    #[test]
    fn poisson_and_unit_shape_gamma_coincide() {
        let mut a = RngStream::for_item(9, 0, StreamPurpose::Arrivals);
        let mut b = RngStream::for_item(9, 0, StreamPurpose::Arrivals);
        for _ in 0..100 {
            let x = next_interarrival(&mut a, ArrivalLaw::PoissonProcess, 0.3).unwrap();
            let y =
                next_interarrival(&mut b, ArrivalLaw::GammaRenewal { omega: 1.0 }, 0.3).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn tiny_shape_samples_stay_positive() {
        let mut s = RngStream::for_item(2, 0, StreamPurpose::Arrivals);
        for _ in 0..10_000 {
            let x = next_interarrival(&mut s, ArrivalLaw::GammaRenewal { omega: 1e-3 }, 0.005)
                .unwrap();
            assert!(x > 0.0 && x.is_finite());
        }
    }

    #[test]
    fn exponential_mean() {
        let mut s = RngStream::for_item(3, 0, StreamPurpose::Arrivals);
        let xs: Vec<f64> = (0..200_000)
            .map(|_| next_interarrival(&mut s, ArrivalLaw::PoissonProcess, 0.005).unwrap())
            .collect();
        let (mean, _) = mean_var(&xs);
        let sigma = 200.0 / (xs.len() as f64).sqrt();
        assert!((mean - 200.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn empty_interval_and_static_content_add_nothing() {
        let mut s = RngStream::for_item(3, 0, StreamPurpose::Versions);
        let mut clock = VersionClock::starting_at(1.0);
        assert_eq!(clock.advance(1.0, 20.0, &mut s).unwrap(), 0);
        assert_eq!(clock.advance(1e6, 0.0, &mut s).unwrap(), 0);
        assert_eq!(clock.last_advanced_at, 1e6);
    }

    #[test]
    fn backwards_advance_is_rejected() {
        let mut s = RngStream::for_item(3, 0, StreamPurpose::Versions);
        let mut clock = VersionClock::starting_at(5.0);
        assert!(matches!(
            clock.advance(4.0, 1.0, &mut s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn poisson_increment_mean() {
        // lambda = 20, dt = 0.5: mean 10, variance 10.
        let mut s = RngStream::for_item(8, 0, StreamPurpose::Versions);
        let trials = 100_000;
        let xs: Vec<f64> = (0..trials)
            .map(|_| {
                let mut c = VersionClock::default();
                c.advance(0.5, 20.0, &mut s).unwrap() as f64
            })
            .collect();
        let (mean, _) = mean_var(&xs);
        let sigma = (10.0 / trials as f64).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn split_intervals_match_single_interval_in_mean() {
        let mut s = RngStream::for_item(8, 1, StreamPurpose::Versions);
        let trials = 50_000;
        let total: u64 = (0..trials)
            .map(|_| {
                let mut c = VersionClock::default();
                for k in 1..=5 {
                    c.advance(0.1 * k as f64, 20.0, &mut s).unwrap();
                }
                c.backend_version
            })
            .sum();
        let mean = total as f64 / trials as f64;
        let sigma = (10.0 / trials as f64).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    proptest::proptest! {
        #[test]
        fn versions_never_decrease(steps in proptest::collection::vec(0.0f64..5.0, 1..50),
                                   rate in 0.0f64..50.0, seed in 0u64..1000) {
            let mut s = RngStream::for_item(seed, 0, StreamPurpose::Versions);
            let mut c = VersionClock::default();
            let mut t = 0.0;
            let mut last = 0;
            for dt in steps {
                t += dt;
                let v = c.advance(t, rate, &mut s).unwrap();
                proptest::prop_assert!(v >= last);
                last = v;
            }
        }
    }
}
