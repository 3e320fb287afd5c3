//! Separable multilevel 2D orthogonal wavelet transform with periodic
//! extension.
//!
//! Coefficients use the Mallat layout on the (possibly padded) grid: the
//! coarsest scaling band sits in the top-left corner, each finer level's
//! three detail bands surround it. The canonical index of a coefficient is
//! its row-major position in that layout.

use crate::error::{Error, Result};
use crate::types::ImageGrid;

/// Least-asymmetric Daubechies filter with four vanishing moments.
#[allow(clippy::excessive_precision)]
const SYM4_LOWPASS: [f64; 8] = [
    -0.075_765_714_789_505_942_203,
    -0.029_635_527_645_999_861_285,
    0.497_618_667_632_777_726_27,
    0.803_738_751_805_131_132_69,
    0.297_857_795_605_303_328_25,
    -0.099_219_543_576_633_600_963,
    -0.012_603_967_262_029_797_79,
    0.032_223_100_604_052_063_833,
];

const HAAR_LOWPASS: [f64; 2] = [
    std::f64::consts::FRAC_1_SQRT_2,
    std::f64::consts::FRAC_1_SQRT_2,
];

/// Smallest side length the coarsest band is allowed to shrink to when the
/// depth is chosen automatically.
pub const MIN_COARSE_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Symlet4,
    Haar,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Symlet4 => "sym4",
            Family::Haar => "haar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sym4" | "symlet4" | "symlet-4" => Ok(Family::Symlet4),
            "haar" => Ok(Family::Haar),
            _ => Err(Error::Domain(format!(
                "unknown wavelet family `{s}` (sym4, haar)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBank {
    pub family: Family,
    pub lowpass: Vec<f64>,
    pub highpass: Vec<f64>,
    /// Decomposition depth; `None` picks the deepest level whose coarsest
    /// band is still at least `MIN_COARSE_SIDE` on the shorter side.
    pub levels: Option<usize>,
    pub boundary: Boundary,
}

impl WaveletBank {
    pub fn new(family: Family) -> Self {
        let lowpass: Vec<f64> = match family {
            Family::Symlet4 => SYM4_LOWPASS.to_vec(),
            Family::Haar => HAAR_LOWPASS.to_vec(),
        };
        let n = lowpass.len();
        // quadrature mirror: g[k] = (-1)^(k+1) h[n-1-k]
        let highpass = (0..n)
            .map(|k| {
                if k % 2 == 0 {
                    -lowpass[n - 1 - k]
                } else {
                    lowpass[n - 1 - k]
                }
            })
            .collect();
        Self {
            family,
            lowpass,
            highpass,
            levels: None,
            boundary: Boundary::Periodic,
        }
    }

    pub fn symlet4() -> Self {
        Self::new(Family::Symlet4)
    }

    pub fn haar() -> Self {
        Self::new(Family::Haar)
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = Some(levels);
        self
    }

    /// Largest deviation from the orthonormality conditions
    /// `sum h[k]^2 = 1` and `sum h[k] h[k+2m] = 0` (same for `g`, plus the
    /// cross terms `sum h[k] g[k+2m] = 0`).
    pub fn orthogonality_error(&self) -> f64 {
        let shifted = |a: &[f64], b: &[f64], shift: isize| -> f64 {
            (0..a.len() as isize)
                .filter_map(|k| {
                    let l = k + shift;
                    (l >= 0 && (l as usize) < b.len()).then(|| a[k as usize] * b[l as usize])
                })
                .sum()
        };
        let n = self.lowpass.len() as isize;
        let mut worst: f64 = 0.0;
        let mut m = -(n / 2);
        while m <= n / 2 {
            let target = if m == 0 { 1.0 } else { 0.0 };
            worst = worst.max((shifted(&self.lowpass, &self.lowpass, 2 * m) - target).abs());
            worst = worst.max((shifted(&self.highpass, &self.highpass, 2 * m) - target).abs());
            worst = worst.max(shifted(&self.lowpass, &self.highpass, 2 * m).abs());
            m += 1;
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        let err = self.orthogonality_error();
        if err > 1e-12 {
            return Err(Error::Domain(format!(
                "{} filters are not orthonormal (error {err:e})",
                self.family.name()
            )));
        }
        Ok(())
    }

    pub fn resolve_levels(&self, width: usize, height: usize) -> usize {
        self.levels.unwrap_or_else(|| {
            let mut levels = 0;
            let mut side = width.min(height);
            while side / 2 >= MIN_COARSE_SIDE {
                side /= 2;
                levels += 1;
            }
            levels
        })
    }
}

impl Default for WaveletBank {
    fn default() -> Self {
        Self::symlet4()
    }
}

/// Padded geometry of a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    pub pad_left: usize,
    pub pad_top: usize,
    pub levels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Scaling,
    /// high-pass along x (columns), low-pass along y
    Horizontal,
    /// low-pass along x, high-pass along y
    Vertical,
    Diagonal,
}

impl Orientation {
    pub fn tag(self) -> &'static str {
        match self {
            Orientation::Scaling => "S",
            Orientation::Horizontal => "H",
            Orientation::Vertical => "V",
            Orientation::Diagonal => "D",
        }
    }
}

/// Position of a coefficient in the multiscale decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaveletIndex {
    pub canonical: usize,
    pub level: usize,
    pub orientation: Orientation,
    pub row: usize,
    pub col: usize,
}

impl Layout {
    pub fn new(width: usize, height: usize, bank: &WaveletBank) -> Self {
        let levels = bank.resolve_levels(width, height);
        let block = 1usize << levels;
        let padded_width = width.div_ceil(block) * block;
        let padded_height = height.div_ceil(block) * block;
        Self {
            width,
            height,
            padded_width,
            padded_height,
            pad_left: (padded_width - width) / 2,
            pad_top: (padded_height - height) / 2,
            levels,
        }
    }

    pub fn is_padded(&self) -> bool {
        self.padded_width != self.width || self.padded_height != self.height
    }

    pub fn num_coefficients(&self) -> usize {
        self.padded_width * self.padded_height
    }

    pub fn index(&self, canonical: usize) -> WaveletIndex {
        let r = canonical / self.padded_width;
        let c = canonical % self.padded_width;
        let coarse_w = self.padded_width >> self.levels;
        let coarse_h = self.padded_height >> self.levels;
        if r < coarse_h && c < coarse_w {
            return WaveletIndex {
                canonical,
                level: self.levels,
                orientation: Orientation::Scaling,
                row: r,
                col: c,
            };
        }
        let mut level = self.levels;
        loop {
            let bw = self.padded_width >> level;
            let bh = self.padded_height >> level;
            if r < 2 * bh && c < 2 * bw {
                let orientation = match (r >= bh, c >= bw) {
                    (false, true) => Orientation::Horizontal,
                    (true, false) => Orientation::Vertical,
                    _ => Orientation::Diagonal,
                };
                return WaveletIndex {
                    canonical,
                    level,
                    orientation,
                    row: r % bh,
                    col: c % bw,
                };
            }
            level -= 1;
        }
    }

    /// Canonical indices of one detail band (or the scaling band).
    pub fn band(&self, level: usize, orientation: Orientation) -> Vec<usize> {
        let bw = self.padded_width >> level;
        let bh = self.padded_height >> level;
        let (r0, c0) = match orientation {
            Orientation::Scaling => (0, 0),
            Orientation::Horizontal => (0, bw),
            Orientation::Vertical => (bh, 0),
            Orientation::Diagonal => (bh, bw),
        };
        (r0..r0 + bh)
            .flat_map(|r| (c0..c0 + bw).map(move |c| r * self.padded_width + c))
            .collect()
    }
}

fn analyze(input: &[f64], low: &[f64], high: &[f64], out: &mut [f64]) {
    let n = input.len();
    let half = n / 2;
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for (t, (&h, &g)) in low.iter().zip(high).enumerate() {
            let x = input[(2 * k + t) % n];
            a += h * x;
            d += g * x;
        }
        out[k] = a;
        out[half + k] = d;
    }
}

fn synthesize(input: &[f64], low: &[f64], high: &[f64], out: &mut [f64]) {
    let n = input.len();
    let half = n / 2;
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..half {
        let (a, d) = (input[k], input[half + k]);
        for (t, (&h, &g)) in low.iter().zip(high).enumerate() {
            out[(2 * k + t) % n] += h * a + g * d;
        }
    }
}

/// Apply a 1D filter pass to every row (`along_rows`) or column of the
/// top-left `w x h` block of a row-major `stride`-wide buffer.
fn pass(
    data: &mut [f64],
    stride: usize,
    w: usize,
    h: usize,
    along_rows: bool,
    op: impl Fn(&[f64], &mut [f64]),
) {
    let len = if along_rows { w } else { h };
    let lines = if along_rows { h } else { w };
    let mut line = vec![0.0; len];
    let mut out = vec![0.0; len];
    for l in 0..lines {
        for (k, v) in line.iter_mut().enumerate() {
            *v = if along_rows {
                data[l * stride + k]
            } else {
                data[k * stride + l]
            };
        }
        op(&line, &mut out);
        for (k, &v) in out.iter().enumerate() {
            if along_rows {
                data[l * stride + k] = v;
            } else {
                data[k * stride + l] = v;
            }
        }
    }
}

/// Wavelet coefficients together with the geometry they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub layout: Layout,
    pub values: Vec<f64>,
}

fn forward_in_place(data: &mut [f64], layout: &Layout, bank: &WaveletBank) {
    let stride = layout.padded_width;
    let (mut w, mut h) = (layout.padded_width, layout.padded_height);
    for _ in 0..layout.levels {
        pass(data, stride, w, h, true, |i, o| {
            analyze(i, &bank.lowpass, &bank.highpass, o)
        });
        pass(data, stride, w, h, false, |i, o| {
            analyze(i, &bank.lowpass, &bank.highpass, o)
        });
        w /= 2;
        h /= 2;
    }
}

fn inverse_in_place(data: &mut [f64], layout: &Layout, bank: &WaveletBank) {
    let stride = layout.padded_width;
    for level in (0..layout.levels).rev() {
        let w = layout.padded_width >> level;
        let h = layout.padded_height >> level;
        pass(data, stride, w, h, false, |i, o| {
            synthesize(i, &bank.lowpass, &bank.highpass, o)
        });
        pass(data, stride, w, h, true, |i, o| {
            synthesize(i, &bank.lowpass, &bank.highpass, o)
        });
    }
}

/// Forward transform of `values` laid out as a `width x height` row-major
/// image. Sizes that are not multiples of `2^levels` are zero-padded evenly
/// on both sides.
pub fn forward(values: &[f64], width: usize, height: usize, bank: &WaveletBank) -> Coefficients {
    let layout = Layout::new(width, height, bank);
    let mut data = vec![0.0; layout.num_coefficients()];
    for r in 0..height {
        let dst = (r + layout.pad_top) * layout.padded_width + layout.pad_left;
        data[dst..dst + width].copy_from_slice(&values[r * width..(r + 1) * width]);
    }
    forward_in_place(&mut data, &layout, bank);
    Coefficients {
        layout,
        values: data,
    }
}

/// Inverse transform on the padded grid (no cropping).
pub fn inverse_padded(coeffs: &Coefficients, bank: &WaveletBank) -> Vec<f64> {
    let mut data = coeffs.values.clone();
    inverse_in_place(&mut data, &coeffs.layout, bank);
    data
}

/// Inverse transform cropped back to the original grid.
pub fn inverse(coeffs: &Coefficients, bank: &WaveletBank) -> Vec<f64> {
    let l = &coeffs.layout;
    let data = inverse_padded(coeffs, bank);
    if !l.is_padded() {
        return data;
    }
    let mut out = Vec::with_capacity(l.width * l.height);
    for r in 0..l.height {
        let src = (r + l.pad_top) * l.padded_width + l.pad_left;
        out.extend_from_slice(&data[src..src + l.width]);
    }
    out
}

pub fn dwt2_forward(image: &ImageGrid, bank: &WaveletBank) -> Coefficients {
    forward(image.values(), image.width, image.height, bank)
}

pub fn dwt2_inverse(coeffs: &Coefficients, bank: &WaveletBank) -> Result<ImageGrid> {
    if coeffs.values.len() != coeffs.layout.num_coefficients() {
        return Err(Error::Contract(format!(
            "layout expects {} coefficients, got {}",
            coeffs.layout.num_coefficients(),
            coeffs.values.len()
        )));
    }
    ImageGrid::new(
        coeffs.layout.width,
        coeffs.layout.height,
        inverse(coeffs, bank),
    )
}
