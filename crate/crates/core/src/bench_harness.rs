//! Timing harness for the scan's cost in `M`, `S` and `V`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afgssm::{scan_channel, AdapterParams, AfgssmParams, FreqSource, ScanParams, Spectral};
use crate::error::Result;
use crate::numerics::Tensor;

/// One channel's scan with `M` patches, frequency dim `S` and hidden dim `V`.
pub struct ScanWorkload {
    pub input: Tensor,
    pub params: AfgssmParams,
}

impl ScanWorkload {
    pub fn new(m: usize, s: usize, v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scan = ScanParams::random(s, v, Spectral::AmpOnly, 0.3, &mut rng);
        // keep the output recurrence contractive so long scans stay finite
        scan.d_y.scale_in_place(0.5 / (s as f64).sqrt());
        scan.wg_y.scale_in_place(0.5 / (s as f64).sqrt());
        let input = Tensor::from_fn(&[m, v], |_| rng.random_range(-1.0..1.0));
        let adapter = AdapterParams::init(v, crate::afgssm::default_adapter_hidden(v), &mut rng);
        ScanWorkload {
            input,
            params: AfgssmParams {
                freq: FreqSource::Adaptive(adapter),
                scan,
            },
        }
    }

    pub fn run(&self) -> Result<Tensor> {
        scan_channel(&self.input, &self.params)
    }
}

/// Wall-clock seconds of `reps` timed runs after one warm-up run.
pub fn time_scan(m: usize, s: usize, v: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    let w = ScanWorkload::new(m, s, v, seed);
    w.run()?;
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            let z = w.run()?;
            let dt = t.elapsed().as_secs_f64();
            std::hint::black_box(z);
            Ok(dt)
        })
        .collect()
}
