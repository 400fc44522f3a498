//! Noisy Sensor-to-Actor channel, bit accounting, and seeded noise streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::abstraction::{Codebook, OperatorSource};

/// Independent random substreams derived from one scenario seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ActorPerception = 1,
    Channel = 2,
    Target = 3,
    Map = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Adds `N(0, variance)` to each entry. Zero variance draws nothing.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    values: &[f64],
    variance: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    if variance == 0.0 {
        return (values.to_vec(), vec![0.0; values.len()]);
    }
    let sd = variance.sqrt();
    let noise: Vec<f64> = values
        .iter()
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noisy = values.iter().zip(&noise).map(|(v, n)| v + n).collect();
    (noisy, noise)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    /// What the Actor receives: observation plus channel noise.
    pub payload: Vec<f64>,
    pub source: OperatorSource,
    pub bits: u64,
    pub noise: Vec<f64>,
}

/// Sends `observation` through the channel and prices it with the codebook.
pub fn transmit<R: Rng + ?Sized>(
    observation: &[f64],
    source: OperatorSource,
    variance: f64,
    codebook: &Codebook,
    rng: &mut R,
) -> Transmission {
    let (payload, noise) = add_gaussian_noise(observation, variance, rng);
    Transmission {
        payload,
        source,
        bits: codebook.bits_for(source, observation.len()),
        noise,
    }
}
