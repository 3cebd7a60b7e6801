//! Streaming distribution of target-class cosines.
//!
//! [`CosHistogram`] keeps the most recent `K` cosines in a ring buffer and a
//! 200-bin frequency table over `[-1, 1]` that is updated incrementally on
//! every push and eviction. [`CosHistogram::stats`] reads the endpoint and
//! peak statistics the weighting policy is driven by, and
//! [`CosHistogram::estimate_noise_rate`] applies the half-mass rule around the
//! detected peaks.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BINS: usize = 200;
pub const BIN_WIDTH: f64 = 0.01;
pub const DEFAULT_CAPACITY: usize = 64_000;
pub const MEAN_FILTER_SIZE: usize = 5;
pub const DEFAULT_ENDPOINT_QUANTILE: f64 = 0.005;
pub const DEFAULT_PEAK_RADIUS: usize = 5;
pub const DEFAULT_ZETA: f64 = 0.5;

/// Values this far outside `[-1, 1]` are treated as rounding and clamped.
const RANGE_TOLERANCE: f64 = 1e-9;

/// Bin holding `v`; `v = 1` belongs to the last bin.
pub fn bin_index(v: f64) -> usize {
    let idx = ((v + 1.0) * (NUM_BINS as f64 / 2.0)).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(NUM_BINS - 1)
    }
}

pub fn bin_center(bin: usize) -> f64 {
    -1.0 + (bin as f64 + 0.5) * BIN_WIDTH
}

/// A local maximum of the smoothed frequency array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub bin: usize,
    pub center: f64,
    pub height: f64,
}

/// Statistics read from one state of the histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct HistStats {
    pub count: usize,
    pub delta_l: f64,
    pub delta_r: f64,
    pub mu_l: Option<f64>,
    pub mu_r: Option<f64>,
    /// Threshold separating left-peak from right-peak candidates.
    pub zeta: f64,
    pub smoothed: Vec<f64>,
    /// Peaks inside `[delta_l, delta_r]`, ascending by bin.
    pub peaks: Vec<Peak>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsParams {
    pub zeta: f64,
    pub quantile: f64,
    pub radius: usize,
}

impl Default for StatsParams {
    fn default() -> Self {
        StatsParams {
            zeta: DEFAULT_ZETA,
            quantile: DEFAULT_ENDPOINT_QUANTILE,
            radius: DEFAULT_PEAK_RADIUS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CosHistogram {
    ring: VecDeque<f64>,
    capacity: usize,
    warmup: usize,
    bins: Vec<u64>,
}

impl CosHistogram {
    /// A histogram holding at most `capacity` values; statistics become
    /// available once it holds `capacity / 10` of them.
    pub fn new(capacity: usize) -> Result<Self> {
        Self::with_warmup(capacity, (capacity / 10).max(1))
    }

    pub fn with_warmup(capacity: usize, warmup: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidInput("histogram capacity must be positive".into()));
        }
        if warmup == 0 || warmup > capacity {
            return Err(Error::InvalidInput(format!(
                "warmup {warmup} must lie in [1, {capacity}]"
            )));
        }
        Ok(CosHistogram {
            ring: VecDeque::with_capacity(capacity),
            capacity,
            warmup,
            bins: vec![0; NUM_BINS],
        })
    }

    /// Rebuilds a histogram from exported bin frequencies, placing every
    /// value at its bin center.
    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        if freqs.len() != NUM_BINS {
            return Err(Error::InvalidInput(format!(
                "expected {NUM_BINS} bins, got {}",
                freqs.len()
            )));
        }
        let total: u64 = freqs.iter().sum();
        let total = usize::try_from(total)
            .map_err(|_| Error::InvalidInput("bin total overflows".into()))?
            .max(1);
        let mut hist = Self::with_warmup(total, 1)?;
        for (bin, &f) in freqs.iter().enumerate() {
            for _ in 0..f {
                hist.push(bin_center(bin))?;
            }
        }
        Ok(hist)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn count(&self) -> usize {
        self.ring.len()
    }

    pub fn is_ready(&self) -> bool {
        self.ring.len() >= self.warmup
    }

    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.ring.iter().copied()
    }

    pub fn push(&mut self, cos_theta: f64) -> Result<()> {
        if !(-1.0 - RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&cos_theta) {
            return Err(Error::InvalidInput(format!(
                "cosine {cos_theta} outside [-1, 1]"
            )));
        }
        let v = cos_theta.clamp(-1.0, 1.0);
        if self.ring.len() == self.capacity {
            if let Some(old) = self.ring.pop_front() {
                self.bins[bin_index(old)] -= 1;
            }
        }
        self.ring.push_back(v);
        self.bins[bin_index(v)] += 1;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.ring.clear();
        self.bins.iter_mut().for_each(|b| *b = 0);
    }

    /// Size-5 mean filter over the bins, zero-padded at both ends.
    pub fn smooth(&self) -> Vec<f64> {
        mean_filter(&self.bins)
    }

    /// Order statistics at rank `ceil(quantile * count)` from each end.
    pub fn endpoints(&self, quantile: f64) -> Result<(f64, f64)> {
        let n = self.ring.len();
        if n == 0 {
            return Err(Error::NotReady {
                count: 0,
                required: 1,
            });
        }
        if !(0.0..=0.5).contains(&quantile) {
            return Err(Error::InvalidInput(format!(
                "endpoint quantile {quantile} outside [0, 0.5]"
            )));
        }
        let rank = ((quantile * n as f64).ceil() as usize).clamp(1, n);
        let mut scratch: Vec<f64> = self.ring.iter().copied().collect();
        let (_, &mut lo, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
        let (_, &mut hi, _) = scratch.select_nth_unstable_by(n - rank, f64::total_cmp);
        Ok((lo, hi))
    }

    pub fn stats(&self, zeta: f64) -> Result<HistStats> {
        self.stats_with(&StatsParams {
            zeta,
            ..Default::default()
        })
    }

    pub fn stats_with(&self, params: &StatsParams) -> Result<HistStats> {
        if !self.is_ready() {
            return Err(Error::NotReady {
                count: self.ring.len(),
                required: self.warmup,
            });
        }
        let (delta_l, delta_r) = self.endpoints(params.quantile)?;
        let smoothed = self.smooth();
        let peaks: Vec<Peak> = find_peaks(&smoothed, params.radius)
            .into_iter()
            .filter(|p| p.center >= delta_l && p.center <= delta_r)
            .collect();

        let (mu_l, mu_r) = select_modes(&peaks, params.zeta);

        Ok(HistStats {
            count: self.ring.len(),
            delta_l,
            delta_r,
            mu_l,
            mu_r,
            zeta: params.zeta,
            smoothed,
            peaks,
        })
    }

    pub fn fraction_below(&self, x: f64) -> f64 {
        if self.ring.is_empty() {
            return 0.0;
        }
        self.ring.iter().filter(|&&v| v < x).count() as f64 / self.ring.len() as f64
    }

    pub fn fraction_above(&self, x: f64) -> f64 {
        if self.ring.is_empty() {
            return 0.0;
        }
        self.ring.iter().filter(|&&v| v > x).count() as f64 / self.ring.len() as f64
    }

    /// Noise rate from the half-mass rule: the region left of `mu_l` holds
    /// about half of the noisy samples, the region right of `mu_r` about half
    /// of the clean ones.
    ///
    /// A lone peak above `zeta` is read as the clean mode with no left peak
    /// detected, so the right-hand rule applies.
    pub fn estimate_noise_rate(&self, st: &HistStats) -> Result<f64> {
        let lone_clean_peak = st.peaks.len() == 1 && st.peaks[0].center > st.zeta;
        let estimate = match (st.mu_l, st.mu_r) {
            (Some(mu_l), _) if !lone_clean_peak => 2.0 * self.fraction_below(mu_l),
            (_, Some(mu_r)) => 1.0 - 2.0 * self.fraction_above(mu_r),
            _ => return Err(Error::EstimationUnavailable),
        };
        Ok(estimate.clamp(0.0, 1.0))
    }

    /// Writes `<stem>.csv` (`bin_center,raw_freq,smoothed_freq`) and the
    /// `<stem>.json` sidecar into `dir`, returning the CSV path.
    pub fn export(&self, dir: &Path, stem: &str, params: &StatsParams) -> Result<PathBuf> {
        let stats = self.stats_with(params).ok();
        let smoothed = match &stats {
            Some(st) => st.smoothed.clone(),
            None => self.smooth(),
        };
        let csv_path = dir.join(format!("{stem}.csv"));
        write_hist_csv(&csv_path, &self.bins, &smoothed)?;

        let sidecar = HistSidecar {
            delta_l: stats.as_ref().map(|s| s.delta_l),
            delta_r: stats.as_ref().map(|s| s.delta_r),
            mu_l: stats.as_ref().and_then(|s| s.mu_l),
            mu_r: stats.as_ref().and_then(|s| s.mu_r),
            count: self.count(),
            noise_rate_estimate: stats
                .as_ref()
                .and_then(|s| self.estimate_noise_rate(s).ok()),
        };
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)
            .map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
        Ok(csv_path)
    }
}

/// JSON sidecar written beside every histogram CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistSidecar {
    pub delta_l: Option<f64>,
    pub delta_r: Option<f64>,
    pub mu_l: Option<f64>,
    pub mu_r: Option<f64>,
    pub count: usize,
    pub noise_rate_estimate: Option<f64>,
}

/// Picks `(mu_l, mu_r)`: the highest peak at or below `zeta` and the highest
/// above it. A single peak is both.
pub fn select_modes(peaks: &[Peak], zeta: f64) -> (Option<f64>, Option<f64>) {
    if let [only] = peaks {
        return (Some(only.center), Some(only.center));
    }
    // Ties: mu_r prefers the larger cosine, mu_l the smaller one.
    let mu_r = peaks
        .iter()
        .filter(|p| p.center > zeta)
        .fold(None::<Peak>, |best, p| match best {
            Some(b) if b.height > p.height => Some(b),
            _ => Some(*p),
        })
        .map(|p| p.center);
    let mu_l = peaks
        .iter()
        .filter(|p| p.center <= zeta)
        .fold(None::<Peak>, |best, p| match best {
            Some(b) if b.height >= p.height => Some(b),
            _ => Some(*p),
        })
        .map(|p| p.center);
    (mu_l, mu_r)
}

pub fn mean_filter(bins: &[u64]) -> Vec<f64> {
    let half = MEAN_FILTER_SIZE / 2;
    let n = bins.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let sum: u64 = bins[lo..=hi].iter().sum();
            sum as f64 / MEAN_FILTER_SIZE as f64
        })
        .collect()
}

/// Bins that strictly exceed every neighbor within `radius`.
pub fn find_peaks(smoothed: &[f64], radius: usize) -> Vec<Peak> {
    let n = smoothed.len();
    (0..n)
        .filter(|&i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n.saturating_sub(1));
            (lo..=hi).all(|j| j == i || smoothed[i] > smoothed[j])
        })
        .map(|i| Peak {
            bin: i,
            center: bin_center(i),
            height: smoothed[i],
        })
        .collect()
}

pub fn write_hist_csv(path: &Path, raw: &[u64], smoothed: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(raw.len() * 24);
    out.push_str("bin_center,raw_freq,smoothed_freq\n");
    for (i, (r, s)) in raw.iter().zip(smoothed).enumerate() {
        out.push_str(&format!("{:.3},{},{}\n", bin_center(i), r, s));
    }
    let mut file = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads the raw frequency column of an exported histogram CSV.
pub fn read_hist_csv(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "bin_center,raw_freq,smoothed_freq" => {}
        _ => return Err(parse_err(1, "missing histogram header".into())),
    }
    let mut freqs = Vec::with_capacity(NUM_BINS);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let f = fields[1]
            .trim()
            .parse::<u64>()
            .map_err(|e| parse_err(i + 1, format!("bad raw_freq {:?}: {e}", fields[1])))?;
        freqs.push(f);
    }
    if freqs.len() != NUM_BINS {
        return Err(parse_err(
            text.lines().count(),
            format!("expected {NUM_BINS} rows, got {}", freqs.len()),
        ));
    }
    Ok(freqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(values: &[f64]) -> CosHistogram {
        let mut h = CosHistogram::with_warmup(values.len().max(1), 1).unwrap();
        for &v in values {
            h.push(v).unwrap();
        }
        h
    }

    #[test]
    fn push_zero_lands_in_midpoint_bin() {
        let h = filled(&[0.0]);
        assert_eq!(h.count(), 1);
        assert_eq!(h.bins()[100], 1);
    }

    #[test]
    fn eviction_keeps_count_at_capacity() {
        let mut h = CosHistogram::new(1000).unwrap();
        for _ in 0..1001 {
            h.push(0.5).unwrap();
        }
        assert_eq!(h.count(), 1000);
        assert_eq!(h.bins()[bin_index(0.5)], 1000);
        assert_eq!(h.bins().iter().sum::<u64>(), 1000);
    }

    #[test]
    fn boundary_values_clamp_into_edge_bins() {
        let h = filled(&[-1.0, 1.0]);
        assert_eq!(h.bins()[0], 1);
        assert_eq!(h.bins()[199], 1);
    }

    #[test]
    fn push_rejects_out_of_range() {
        let mut h = CosHistogram::new(10).unwrap();
        assert!(h.push(1.0 + 5e-10).is_ok());
        assert!(h.push(-1.0 - 5e-10).is_ok());
        assert!(matches!(h.push(1.01), Err(Error::InvalidInput(_))));
        assert!(matches!(h.push(f64::NAN), Err(Error::InvalidInput(_))));
        assert_eq!(h.count(), 2);
    }

    #[test]
    fn smooth_of_empty_is_zero() {
        let h = CosHistogram::new(10).unwrap();
        assert!(h.smooth().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_of_spike_spreads_over_five_bins() {
        let mut bins = vec![0u64; NUM_BINS];
        bins[100] = 5;
        let s = mean_filter(&bins);
        for (i, &v) in s.iter().enumerate() {
            let expected = if (98..=102).contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(v, expected, "bin {i}");
        }
    }

    #[test]
    fn smooth_of_uniform_drops_at_edges() {
        let bins = vec![10u64; NUM_BINS];
        let s = mean_filter(&bins);
        // window sums at the boundary: 3 and 4 in-range bins out of 5
        assert_eq!(s[0], 6.0);
        assert_eq!(s[1], 8.0);
        assert_eq!(s[2], 10.0);
        assert_eq!(s[197], 10.0);
        assert_eq!(s[198], 8.0);
        assert_eq!(s[199], 6.0);
    }

    #[test]
    fn endpoints_of_linspace() {
        let values: Vec<f64> = (0..1000).map(|i| -0.9 + 1.8 * i as f64 / 999.0).collect();
        let h = filled(&values);
        let (l, r) = h.endpoints(0.005).unwrap();
        // rank 5 from each end of the sorted sequence
        assert!((l - -0.892_792_792_792_8).abs() < 1e-12, "{l}");
        assert!((r - 0.892_792_792_792_8).abs() < 1e-12, "{r}");
    }

    #[test]
    fn endpoints_degenerate() {
        let h = filled(&[0.3; 50]);
        assert_eq!(h.endpoints(0.005).unwrap(), (0.3, 0.3));
        let h = filled(&[0.7]);
        assert_eq!(h.endpoints(0.005).unwrap(), (0.7, 0.7));
        let h = CosHistogram::new(10).unwrap();
        assert!(matches!(h.endpoints(0.005), Err(Error::NotReady { .. })));
    }

    #[test]
    fn peaks_of_flat_array_are_empty() {
        assert!(find_peaks(&[0.0; NUM_BINS], 5).is_empty());
    }

    fn bump(center: f64, width: f64, height: f64) -> Vec<f64> {
        (0..NUM_BINS)
            .map(|i| height * (-(i as f64 - center).powi(2) / (2.0 * width * width)).exp())
            .collect()
    }

    #[test]
    fn single_bump_has_one_peak() {
        let peaks = find_peaks(&bump(150.0, 6.0, 100.0), 5);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].bin, 150);
    }

    #[test]
    fn two_bumps_have_two_peaks() {
        let a = bump(60.0, 5.0, 80.0);
        let b = bump(160.0, 7.0, 120.0);
        let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let bins: Vec<usize> = find_peaks(&s, 5).iter().map(|p| p.bin).collect();
        assert_eq!(bins, vec![60, 160]);
    }

    #[test]
    fn plateau_is_not_a_peak() {
        let mut s = vec![0.0; NUM_BINS];
        s[100] = 2.0;
        s[103] = 2.0;
        assert!(find_peaks(&s, 5).is_empty());
    }

    #[test]
    fn stats_requires_warmup() {
        let mut h = CosHistogram::new(100).unwrap();
        for _ in 0..9 {
            h.push(0.1).unwrap();
        }
        assert!(matches!(
            h.stats(0.5),
            Err(Error::NotReady {
                count: 9,
                required: 10
            })
        ));
        h.push(0.1).unwrap();
        assert!(h.stats(0.5).is_ok());
    }

    fn from_bins(bins: &[u64]) -> CosHistogram {
        CosHistogram::from_frequencies(bins).unwrap()
    }

    #[test]
    fn highest_left_peak_wins() {
        let mut s = vec![0.0; NUM_BINS];
        s[60] = 3.0;
        s[90] = 9.0;
        s[120] = 5.0;
        s[180] = 4.0;
        let peaks = find_peaks(&s, 5);
        assert_eq!(peaks.len(), 4);
        let (mu_l, mu_r) = select_modes(&peaks, 0.5);
        assert_eq!(mu_l, Some(bin_center(90)));
        assert_eq!(mu_r, Some(bin_center(180)));
    }

    /// Raw triangle `a, 2a, 3a, 2a, a` centred on `bin`; strict peak after smoothing.
    fn add_triangle(bins: &mut [u64], bin: usize, a: u64) {
        for (off, k) in [(0, 1), (1, 2), (2, 3), (3, 2), (4, 1)] {
            bins[bin + off - 2] += a * k;
        }
    }

    #[test]
    fn stats_picks_highest_peak_per_side() {
        let mut bins = vec![0u64; NUM_BINS];
        add_triangle(&mut bins, 60, 5);
        add_triangle(&mut bins, 90, 15);
        add_triangle(&mut bins, 120, 25 / 3);
        add_triangle(&mut bins, 180, 20);
        bins[0] = 1;
        bins[199] = 1;
        let h = from_bins(&bins);
        let st = h
            .stats_with(&StatsParams {
                quantile: 0.0,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(st.peaks.len(), 4);
        assert_eq!(st.mu_l, Some(bin_center(90)));
        assert_eq!(st.mu_r, Some(bin_center(180)));
        assert!(st.delta_l <= st.mu_l.unwrap() && st.mu_r.unwrap() <= st.delta_r);
    }

    #[test]
    fn equal_height_ties_widen_separation() {
        let mut bins = vec![0u64; NUM_BINS];
        for b in [40, 80, 160, 190] {
            add_triangle(&mut bins, b, 10);
        }
        let h = from_bins(&bins);
        let st = h
            .stats_with(&StatsParams {
                quantile: 0.0,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(st.peaks.len(), 4);
        assert_eq!(st.mu_l, Some(bin_center(40)));
        assert_eq!(st.mu_r, Some(bin_center(190)));
    }

    #[test]
    fn peaks_outside_endpoints_are_ignored() {
        let mut bins = vec![0u64; NUM_BINS];
        add_triangle(&mut bins, 100, 400);
        add_triangle(&mut bins, 195, 1);
        let h = from_bins(&bins);
        let st = h.stats(0.5).unwrap();
        assert!(find_peaks(&st.smoothed, 5).len() == 2);
        assert_eq!(st.peaks.len(), 1);
        assert_eq!(st.peaks[0].bin, 100);
    }

    #[test]
    fn lone_peak_sets_both() {
        let mut bins = vec![0u64; NUM_BINS];
        for (i, b) in bins.iter_mut().enumerate() {
            let d = i as f64 - 170.0;
            *b = (1000.0 * (-d * d / 50.0).exp()).round() as u64;
        }
        let h = from_bins(&bins);
        let st = h.stats(0.5).unwrap();
        assert_eq!(st.peaks.len(), 1);
        assert_eq!(st.mu_l, st.mu_r);
        assert!((st.mu_r.unwrap() - 0.705).abs() < 1e-12);
        // lone peak above zeta is the clean mode: right-hand rule, about 0
        let est = h.estimate_noise_rate(&st).unwrap();
        assert!(est < 0.1, "{est}");
    }

    #[test]
    fn no_peaks_means_unavailable() {
        let h = filled(&[0.3; 100]);
        let st = h.stats(0.5).unwrap();
        assert!(st.peaks.is_empty());
        assert!(matches!(
            h.estimate_noise_rate(&st),
            Err(Error::EstimationUnavailable)
        ));
    }

    #[test]
    fn empty_left_region_estimates_zero() {
        let h = filled(&[0.2, 0.4, 0.6]);
        let st = HistStats {
            count: 3,
            delta_l: 0.2,
            delta_r: 0.6,
            mu_l: Some(0.2),
            mu_r: Some(0.6),
            zeta: 0.5,
            smoothed: h.smooth(),
            peaks: vec![],
        };
        assert_eq!(h.estimate_noise_rate(&st).unwrap(), 0.0);
    }

    #[test]
    fn right_rule_when_left_peak_missing() {
        let h = filled(&[0.1, 0.2, 0.7, 0.8, 0.9]);
        let st = HistStats {
            count: 5,
            delta_l: 0.1,
            delta_r: 0.9,
            mu_l: None,
            mu_r: Some(0.75),
            zeta: 0.5,
            smoothed: h.smooth(),
            peaks: vec![],
        };
        // 2 of 5 above mu_r
        assert!((h.estimate_noise_rate(&st).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_through_export() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..500).map(|i| (i as f64 / 250.0) - 1.0).collect();
        let h = filled(&values);
        let path = h.export(dir.path(), "hist_0", &StatsParams::default()).unwrap();
        let freqs = read_hist_csv(&path).unwrap();
        assert_eq!(freqs, h.bins());
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), NUM_BINS + 1);
        let sidecar: HistSidecar =
            serde_json::from_str(&fs::read_to_string(dir.path().join("hist_0.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar.count, 500);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn bimodal() -> impl Strategy<Value = Vec<f64>> {
            (-0.95f64..0.95, -0.95f64..0.95, 0.0f64..0.3, 0.0f64..1.0)
                .prop_flat_map(|(a, b, spread, share)| {
                    prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 50..1500).prop_map(move |draws| {
                        draws
                            .into_iter()
                            .map(|(pick, jitter)| {
                                let center = if pick < share { a } else { b };
                                (center + spread * jitter).clamp(-1.0, 1.0)
                            })
                            .collect()
                    })
                })
        }

        proptest! {
            #[test]
            fn stats_are_ordered(values in bimodal(), zeta in 0.05f64..0.95) {
                let st = filled(&values).stats(zeta).unwrap();
                let mut chain = vec![st.delta_l];
                chain.extend(st.mu_l);
                chain.extend(st.mu_r);
                chain.push(st.delta_r);
                prop_assert!(chain.windows(2).all(|w| w[0] <= w[1]), "{chain:?}");
            }

            #[test]
            fn peaks_dominate_their_neighborhood(values in bimodal()) {
                let smoothed = filled(&values).smooth();
                for p in find_peaks(&smoothed, DEFAULT_PEAK_RADIUS) {
                    let lo = p.bin.saturating_sub(DEFAULT_PEAK_RADIUS);
                    let hi = (p.bin + DEFAULT_PEAK_RADIUS).min(NUM_BINS - 1);
                    prop_assert!((lo..=hi).filter(|&j| j != p.bin).all(|j| smoothed[j] < p.height));
                }
            }

            #[test]
            fn estimate_lies_in_unit_interval(values in bimodal()) {
                let h = filled(&values);
                let st = h.stats(DEFAULT_ZETA).unwrap();
                if let Ok(est) = h.estimate_noise_rate(&st) {
                    prop_assert!((0.0..=1.0).contains(&est));
                }
            }

            #[test]
            fn bins_always_sum_to_count(values in prop::collection::vec(-1.0f64..=1.0, 0..400), cap in 1usize..200) {
                let mut h = CosHistogram::with_warmup(cap, 1).unwrap();
                for v in values {
                    h.push(v).unwrap();
                }
                prop_assert_eq!(h.bins().iter().sum::<u64>() as usize, h.count());
                prop_assert!(h.count() <= cap);
            }
        }
    }
}
