//! Discrete wavelet cascade `Y_ik = sum_p h_p Y_{i-1,2k+p}` and the causal
//! per-bar Haar detail stream used by the live model.

use std::f64::consts::FRAC_1_SQRT_2;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WaveletError {
    #[error("series of length {got} is too short for {levels} levels (need {need})")]
    Length { levels: usize, need: usize, got: usize },
    #[error("inconsistent pyramid: {0}")]
    Shape(String),
    #[error("filter bank `{0}` is not orthonormal")]
    NotOrthonormal(String),
    #[error("window must be >= 1")]
    Window,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub name: String,
    /// Smoothing (scaling) filter.
    pub h: Vec<f64>,
    /// Detail filter, the quadrature mirror of `h`.
    pub g: Vec<f64>,
}

impl FilterBank {
    /// Haar: `h = (1, 1)/sqrt(2)`, `g = (1, -1)/sqrt(2)`; the detail is
    /// positive when the first half of the support is larger.
    pub fn haar() -> Self {
        Self {
            name: "haar".into(),
            h: vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            g: vec![FRAC_1_SQRT_2, -FRAC_1_SQRT_2],
        }
    }

    /// Builds a bank from smoothing coefficients; `g_p = (-1)^p h_{L-1-p}`.
    pub fn from_smoothing(name: &str, h: Vec<f64>) -> Result<Self, WaveletError> {
        let energy: f64 = h.iter().map(|c| c * c).sum();
        if h.len() < 2 || h.len() % 2 != 0 || (energy - 1.0).abs() > 1e-12 {
            return Err(WaveletError::NotOrthonormal(name.into()));
        }
        let l = h.len();
        let g = (0..l)
            .map(|p| if p % 2 == 0 { h[l - 1 - p] } else { -h[l - 1 - p] })
            .collect();
        Ok(Self {
            name: name.into(),
            h,
            g,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub approx: Vec<f64>,
    pub detail: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    /// `levels[i - 1]` holds scale `i`.
    pub levels: Vec<Level>,
    pub base_len: usize,
}

impl WaveletPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Rows of `(level, index, kind, value)` for CSV dumps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,index,kind,value\n");
        for (i, lvl) in self.levels.iter().enumerate() {
            for (k, v) in lvl.approx.iter().enumerate() {
                out.push_str(&format!("{},{},approx,{:e}\n", i + 1, k, v));
            }
            for (k, v) in lvl.detail.iter().enumerate() {
                out.push_str(&format!("{},{},detail,{:e}\n", i + 1, k, v));
            }
        }
        out
    }
}

fn analysis_step(src: &[f64], bank: &FilterBank) -> Level {
    // Odd trailing sample is dropped; taps past the end wrap within the
    // even-length prefix (never happens for Haar).
    let even = src.len() - src.len() % 2;
    let half = even / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for (p, (hp, gp)) in bank.h.iter().zip(&bank.g).enumerate() {
            let x = src[(2 * k + p) % even];
            a += hp * x;
            d += gp * x;
        }
        approx[k] = a;
        detail[k] = d;
    }
    Level { approx, detail }
}

pub fn decompose(series: &[f64], levels: usize, bank: &FilterBank) -> Result<WaveletPyramid, WaveletError> {
    let need = 1usize << levels;
    if levels == 0 || series.len() < need {
        return Err(WaveletError::Length {
            levels,
            need,
            got: series.len(),
        });
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = series.to_vec();
    for _ in 0..levels {
        let lvl = analysis_step(&current, bank);
        current = lvl.approx.clone();
        out.push(lvl);
    }
    Ok(WaveletPyramid {
        levels: out,
        base_len: series.len(),
    })
}

/// Inverse cascade. The result has length `2^K * len(level K)`, i.e. the
/// source minus any samples truncated on the way down.
pub fn reconstruct(pyramid: &WaveletPyramid, bank: &FilterBank) -> Result<Vec<f64>, WaveletError> {
    let Some(last) = pyramid.levels.last() else {
        return Err(WaveletError::Shape("empty pyramid".into()));
    };
    let mut expected = pyramid.base_len;
    for (i, lvl) in pyramid.levels.iter().enumerate() {
        expected /= 2;
        if lvl.approx.len() != lvl.detail.len() || lvl.approx.len() != expected {
            return Err(WaveletError::Shape(format!(
                "level {} has lengths ({}, {}), expected {}",
                i + 1,
                lvl.approx.len(),
                lvl.detail.len(),
                expected
            )));
        }
    }
    let mut approx = last.approx.clone();
    for lvl in pyramid.levels.iter().rev() {
        let n = 2 * approx.len();
        let mut out = vec![0.0; n];
        for k in 0..approx.len() {
            for (p, (hp, gp)) in bank.h.iter().zip(&bank.g).enumerate() {
                out[(2 * k + p) % n] += hp * approx[k] + gp * lvl.detail[k];
            }
        }
        approx = out;
    }
    Ok(approx)
}

/// Causal Haar detail: at each `t` the difference between the trailing means
/// over `window` and `2 * window` samples, scaled by `sqrt(2 * window)`.
/// Positive when recent values exceed the longer average; element `j` is
/// time `t = j + 2 * window - 1`.
pub fn haar_detail_stream(series: &[f64], window: usize) -> Result<Vec<f64>, WaveletError> {
    if window == 0 {
        return Err(WaveletError::Window);
    }
    let span = 2 * window;
    if series.len() < span {
        return Err(WaveletError::Length {
            levels: 1,
            need: span,
            got: series.len(),
        });
    }
    let scale = (span as f64).sqrt();
    let out = series
        .windows(span)
        .map(|w| {
            let recent: f64 = w[window..].iter().sum::<f64>() / window as f64;
            let longer: f64 = w.iter().sum::<f64>() / span as f64;
            (recent - longer) * scale
        })
        .collect();
    Ok(out)
}

/// Incremental form of [`haar_detail_stream`] over a bounded history.
#[derive(Debug, Clone)]
pub struct HaarStream {
    window: usize,
    buf: std::collections::VecDeque<f64>,
}

impl HaarStream {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1);
        Self {
            window,
            buf: std::collections::VecDeque::with_capacity(2 * window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Feeds one value; returns the detail once `2 * window` values are seen.
    pub fn push(&mut self, x: f64) -> Option<f64> {
        let span = 2 * self.window;
        if self.buf.len() == span {
            self.buf.pop_front();
        }
        self.buf.push_back(x);
        if self.buf.len() < span {
            return None;
        }
        // Summed in the same order as the batch version so both agree bit for bit.
        let recent: f64 = self.buf.iter().skip(self.window).sum::<f64>() / self.window as f64;
        let longer: f64 = self.buf.iter().sum::<f64>() / span as f64;
        Some((recent - longer) * (span as f64).sqrt())
    }
}
