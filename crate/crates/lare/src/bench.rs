//! Wall-clock comparison of single-step LaRE against the multi-step
//! inversion baseline.

use std::time::Instant;

use lare_core::diffusion::{CountingDenoiser, Denoiser, NoiseSchedule};
use lare_core::lare::{compute_lare_batch, dire_feature_batch};
use lare_core::LatentGrid;

use crate::report::BenchRow;
use crate::{Error, Result};

/// One timed method.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub method: String,
    /// Exact denoiser calls per image.
    pub calls_per_image: f64,
    /// Median over repeats of wall time per image.
    pub median_ms_per_image: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `f` once untimed, then `repeats` timed; returns calls per image and
/// the median milliseconds per image.
fn time<D: Denoiser>(
    counter: &CountingDenoiser<D>,
    images: usize,
    repeats: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<(f64, f64)> {
    f()?;
    counter.reset();
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        ms.push(start.elapsed().as_secs_f64() * 1e3 / images as f64);
    }
    let calls = counter.calls() as f64 / (repeats * images) as f64;
    Ok((calls, median(ms)))
}

/// Times LaRE at step `t` with ensemble size `e` (and `2e`, to show linear scaling) and the
/// inversion baseline at `dire_steps`, each over all `latents` as one batch.
pub fn bench_extraction<D: Denoiser>(
    latents: &[LatentGrid],
    denoiser: D,
    schedule: &NoiseSchedule,
    t: usize,
    e: usize,
    dire_steps: usize,
    repeats: usize,
) -> Result<Vec<Timing>> {
    if repeats < 3 {
        return Err(Error::Usage("timing needs at least 3 repeats".into()));
    }
    if latents.is_empty() {
        return Err(Error::Usage("no latents to time".into()));
    }
    let counter = CountingDenoiser::new(denoiser);
    let n = latents.len();
    let items: Vec<(&LatentGrid, u64)> = latents.iter().zip(0u64..).collect();
    let mut out = Vec::new();
    for ens in [e, 2 * e] {
        let (calls, ms) = time(&counter, n, repeats, || {
            compute_lare_batch(&items, t, ens, &counter, schedule)?;
            Ok(())
        })?;
        out.push(Timing {
            method: format!("lare_e{ens}"),
            calls_per_image: calls,
            median_ms_per_image: ms,
        });
    }
    let (calls, ms) = time(&counter, n, repeats, || {
        dire_feature_batch(latents, &counter, schedule, dire_steps)?;
        Ok(())
    })?;
    out.push(Timing {
        method: format!("dire_s{dire_steps}"),
        calls_per_image: calls,
        median_ms_per_image: ms,
    });
    out.push(Timing {
        method: "ratio_dire_over_lare".into(),
        calls_per_image: out[2].calls_per_image / out[0].calls_per_image,
        median_ms_per_image: out[2].median_ms_per_image / out[0].median_ms_per_image,
    });
    Ok(out)
}

pub fn to_rows(timings: &[Timing]) -> Vec<BenchRow> {
    timings
        .iter()
        .map(|t| BenchRow {
            method: t.method.clone(),
            calls_per_image: t.calls_per_image,
            median_ms_per_image: t.median_ms_per_image,
        })
        .collect()
}
