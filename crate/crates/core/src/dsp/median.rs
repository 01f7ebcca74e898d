use std::collections::VecDeque;

use crate::error::{Error, Result};

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Parameter(format!("median window must be odd and >= 1, got {window}")));
    }
    Ok(())
}

fn insert_sorted(sorted: &mut Vec<f64>, x: f64) {
    let at = sorted.partition_point(|v| v.total_cmp(&x).is_lt());
    sorted.insert(at, x);
}

fn remove_sorted(sorted: &mut Vec<f64>, x: f64) {
    let at = sorted.partition_point(|v| v.total_cmp(&x).is_lt());
    sorted.remove(at);
}

/// Centered sliding median with the window shrunk symmetrically near the edges.
///
/// Sample `i` uses `series[i-h..=i+h]` with `h = min(window/2, i, n-1-i)`, so every
/// window has odd length and the output has the input's length.
pub fn median_filter(series: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    let n = series.len();
    if window > n {
        return Err(Error::Parameter(format!(
            "median window {window} exceeds series length {n}"
        )));
    }
    let half = window / 2;
    let mut sorted: Vec<f64> = Vec::with_capacity(window);
    let (mut lo, mut hi) = (0usize, 0usize); // current window is series[lo..hi]
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let h = half.min(i).min(n - 1 - i);
        let (want_lo, want_hi) = (i - h, i + h + 1);
        while hi < want_hi {
            insert_sorted(&mut sorted, series[hi]);
            hi += 1;
        }
        while lo < want_lo {
            remove_sorted(&mut sorted, series[lo]);
            lo += 1;
        }
        out.push(sorted[sorted.len() / 2]);
    }
    Ok(out)
}

/// Trailing-window median for live streams.
///
/// Until the window fills, the median of the samples seen so far is reported (the mean
/// of the two middle values for an even count).
#[derive(Debug, Clone)]
pub struct StreamingMedian {
    window: usize,
    recent: VecDeque<f64>,
    sorted: Vec<f64>,
}

impl StreamingMedian {
    pub fn new(window: usize) -> Result<Self> {
        check_window(window)?;
        Ok(Self {
            window,
            recent: VecDeque::with_capacity(window),
            sorted: Vec::with_capacity(window),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn reset(&mut self) {
        self.recent.clear();
        self.sorted.clear();
    }

    pub fn push(&mut self, x: f64) -> f64 {
        if self.recent.len() == self.window {
            let old = self.recent.pop_front().expect("window is non-empty");
            remove_sorted(&mut self.sorted, old);
        }
        self.recent.push_back(x);
        insert_sorted(&mut self.sorted, x);
        self.median()
    }

    pub fn median(&self) -> f64 {
        let n = self.sorted.len();
        match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => self.sorted[n / 2],
            _ => 0.5 * (self.sorted[n / 2 - 1] + self.sorted[n / 2]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(series: &[f64], window: usize) -> Vec<f64> {
        let n = series.len();
        (0..n)
            .map(|i| {
                let h = (window / 2).min(i).min(n - 1 - i);
                let mut w = series[i - h..=i + h].to_vec();
                w.sort_by(f64::total_cmp);
                w[w.len() / 2]
            })
            .collect()
    }

    #[test]
    fn three_element_median() {
        assert_eq!(median_filter(&[1.0, 5.0, 2.0], 3).unwrap(), vec![1.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_unchanged() {
        let x = vec![0.7; 50];
        assert_eq!(median_filter(&x, 11).unwrap(), x);
    }

    #[test]
    fn window_errors() {
        assert!(median_filter(&[1.0, 2.0, 3.0, 4.0], 2).is_err());
        assert!(median_filter(&[1.0, 2.0], 3).is_err());
        assert!(median_filter(&[1.0], 0).is_err());
        assert!(StreamingMedian::new(300).is_err());
    }

    #[test]
    fn matches_brute_force_with_duplicates() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64).collect();
        for w in [1, 3, 9, 51, 199] {
            assert_eq!(median_filter(&x, w).unwrap(), brute(&x, w));
        }
    }

    #[test]
    fn streaming_warm_up_and_steady_state() {
        let mut m = StreamingMedian::new(3).unwrap();
        assert_eq!(m.push(4.0), 4.0);
        assert_eq!(m.push(2.0), 3.0);
        assert_eq!(m.push(9.0), 4.0);
        assert_eq!(m.push(1.0), 2.0);
        assert_eq!(m.len(), 3);
    }
}
