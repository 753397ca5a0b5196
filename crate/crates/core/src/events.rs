//! Event simulation, temporal binning and EDI blur decoupling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Default offset added before taking the log of an intensity.
pub const DEFAULT_LOG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t_us: u64,
    /// +1 or -1.
    pub polarity: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub t_start: u64,
    pub t_end: u64,
    pub width: usize,
    pub height: usize,
}

impl EventStream {
    pub fn new(width: usize, height: usize, t_start: u64, t_end: u64, events: Vec<Event>) -> Result<Self> {
        let s = EventStream { events, t_start, t_end, width, height };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_end < self.t_start {
            return Err(Error::InvalidArgument(format!(
                "stream ends ({}) before it starts ({})",
                self.t_end, self.t_start
            )));
        }
        let mut prev = self.t_start;
        for e in &self.events {
            if (e.x as usize) >= self.width || (e.y as usize) >= self.height {
                return Err(Error::InvalidArgument(format!(
                    "event at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.polarity != 1 && e.polarity != -1 {
                return Err(Error::InvalidArgument(format!("polarity must be +-1, got {}", e.polarity)));
            }
            if e.t_us < prev || e.t_us > self.t_end {
                return Err(Error::InvalidArgument(format!(
                    "event timestamp {} out of order or outside [{}, {}]",
                    e.t_us, self.t_start, self.t_end
                )));
            }
            prev = e.t_us;
        }
        Ok(())
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.polarity as i64).sum()
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }
}

/// Per-pixel polarity sums over `u` equal sub-intervals of the exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct EventBins {
    pub width: usize,
    pub height: usize,
    pub t_start: u64,
    pub t_end: u64,
    /// `bins[k - 1]` holds the row-major raster for sub-interval `k`.
    pub bins: Vec<Vec<i32>>,
}

impl EventBins {
    pub fn zeros(width: usize, height: usize, u: usize, t_start: u64, t_end: u64) -> Self {
        EventBins { width, height, t_start, t_end, bins: vec![vec![0; width * height]; u] }
    }

    pub fn u(&self) -> usize {
        self.bins.len()
    }

    /// Boundary `t_k = t_start + (k / u) * t_exp`, `k = 0..=u`.
    pub fn boundary(&self, k: usize) -> f64 {
        self.t_start as f64 + (k as f64 / self.u() as f64) * (self.t_end - self.t_start) as f64
    }

    pub fn total(&self) -> i64 {
        self.bins.iter().flatten().map(|&c| c as i64).sum()
    }

    /// Per-pixel cumulative sums `sum_{i <= k} E_i` for `k = 1..=u`.
    pub fn cumulative(&self) -> Vec<Vec<i32>> {
        let mut acc = vec![0i32; self.width * self.height];
        self.bins
            .iter()
            .map(|b| {
                for (a, &c) in acc.iter_mut().zip(b) {
                    *a += c;
                }
                acc.clone()
            })
            .collect()
    }
}

/// Emits events for every full `threshold` crossing of `log(I + log_eps)`
/// between consecutive frames. The per-pixel reference level advances by one
/// threshold per event and carries its residual across frames. Timestamps are
/// linearly interpolated inside the frame interval.
pub fn simulate_events(
    frames: &[Image],
    timestamps: &[u64],
    threshold: f64,
    log_eps: f64,
) -> Result<EventStream> {
    if !(threshold > 0.0) {
        return Err(Error::NonPositiveThreshold(threshold));
    }
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {}", frames.len())));
    }
    if timestamps.len() != frames.len() {
        return Err(Error::CountMismatch(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("frame timestamps must be strictly increasing".into()));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| f.width() != w || f.height() != h) {
        return Err(Error::DimensionMismatch("all frames must share dimensions".into()));
    }
    if w > u16::MAX as usize + 1 || h > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument("sensor exceeds 16-bit coordinates".into()));
    }
    let logs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.to_gray().data().iter().map(|&v| (v + log_eps).ln()).collect())
        .collect();
    let tol = 1e-9 * threshold;

    let per_pixel: Vec<Vec<Event>> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (x, y) = ((p % w) as u16, (p / w) as u16);
            let mut out = Vec::new();
            let mut reference = logs[0][p];
            for j in 0..frames.len() - 1 {
                let (prev, next) = (logs[j][p], logs[j + 1][p]);
                let (t0, t1) = (timestamps[j], timestamps[j + 1]);
                let mut emit = |level: f64, polarity: i8| {
                    let span = next - prev;
                    let frac = if span.abs() > 0.0 { ((level - prev) / span).clamp(0.0, 1.0) } else { 1.0 };
                    let t = t0 as f64 + frac * (t1 - t0) as f64;
                    let t_us = (t.round() as u64).clamp(t0 + 1, t1);
                    out.push(Event { x, y, t_us, polarity });
                };
                while next - reference >= threshold - tol {
                    reference += threshold;
                    emit(reference, 1);
                }
                while reference - next >= threshold - tol {
                    reference -= threshold;
                    emit(reference, -1);
                }
            }
            out
        })
        .collect();

    let mut events: Vec<Event> = per_pixel.into_iter().flatten().collect();
    // Stable sort keeps per-pixel causal order for equal timestamps.
    events.sort_by_key(|e| (e.t_us, e.y, e.x));
    EventStream::new(w, h, timestamps[0], *timestamps.last().unwrap(), events)
}

/// Partitions the exposure into `u` sub-intervals; an event with
/// `tau in (t_{k-1}, t_k]` lands in bin `k`. Events exactly at `t_start` go to bin 1.
pub fn bin_events(stream: &EventStream, u: usize) -> Result<EventBins> {
    if u == 0 {
        return Err(Error::InvalidArgument("bin count u must be >= 1".into()));
    }
    let mut bins = EventBins::zeros(stream.width, stream.height, u, stream.t_start, stream.t_end);
    let t_exp = stream.duration() as u128;
    for e in &stream.events {
        let k = if t_exp == 0 {
            1
        } else {
            let num = (e.t_us.saturating_sub(stream.t_start)) as u128 * u as u128;
            (num.div_ceil(t_exp) as usize).clamp(1, u)
        };
        bins.bins[k - 1][e.y as usize * stream.width + e.x as usize] += e.polarity as i32;
    }
    Ok(bins)
}

/// Output of [`edi_decouple`]: the exposure-start frame and the `u` latents.
#[derive(Debug, Clone)]
pub struct Decoupled {
    pub start: Image,
    pub latents: Vec<Image>,
}

impl Decoupled {
    /// `I_0` followed by `I_1..I_u`.
    pub fn all_frames(&self) -> Vec<Image> {
        std::iter::once(self.start.clone()).chain(self.latents.iter().cloned()).collect()
    }
}

/// Recovers `I_0` and `I_k = I_0 exp(theta * sum_{i<=k} E_i)` from a blurred
/// frame that averages `I_0..I_u`. Color blurs share one weight field.
pub fn edi_decouple(blur: &Image, bins: &EventBins, threshold: f64) -> Result<Decoupled> {
    if blur.width() != bins.width || blur.height() != bins.height {
        return Err(Error::DimensionMismatch(format!(
            "blur is {}x{}, events are {}x{}",
            blur.width(),
            blur.height(),
            bins.width,
            bins.height
        )));
    }
    if !(threshold >= 0.0) {
        return Err(Error::NonPositiveThreshold(threshold));
    }
    let u = bins.u();
    let ch = blur.channels();
    let cumulative = bins.cumulative();
    let mut start = blur.clone();
    let mut latents = vec![blur.clone(); u];
    let mut weights = vec![0.0; u];
    for p in 0..blur.pixel_count() {
        let mut denom = 1.0;
        for k in 0..u {
            weights[k] = (threshold * cumulative[k][p] as f64).exp();
            denom += weights[k];
        }
        for c in 0..ch {
            let i0 = (u as f64 + 1.0) * blur.data()[p * ch + c] / denom;
            start.data_mut()[p * ch + c] = i0;
            for k in 0..u {
                latents[k].data_mut()[p * ch + c] = i0 * weights[k];
            }
        }
    }
    Ok(Decoupled { start, latents })
}

/// Per-pixel arithmetic mean of a frame sequence.
pub fn synthesize_blur(latents: &[Image]) -> Result<Image> {
    let first = latents.first().ok_or(Error::EmptySequence("synthesize_blur needs at least one image"))?;
    let mut acc = first.clone();
    for img in &latents[1..] {
        first.ensure_same_shape(img)?;
        for (a, &b) in acc.data_mut().iter_mut().zip(img.data()) {
            *a += b;
        }
    }
    let n = latents.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    Ok(acc)
}
