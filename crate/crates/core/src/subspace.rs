//! Per-frame distortion subspaces.
//!
//! A subspace is built once from its frame and never modified afterwards;
//! the solver only reads `basis`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::config::ConfigEntries;
use crate::error::{Error, Result};
use crate::persist;
use crate::types::ImageGrid;
use crate::wavelet::{self, Coefficients, Layout, Orientation, WaveletBank, WaveletIndex};

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Wavelet {
        family: &'static str,
        indices: Vec<WaveletIndex>,
    },
    Oracle,
    /// Loaded from disk; the sidecar text is kept verbatim.
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSubspace {
    basis: DMatrix<f64>,
    provenance: Provenance,
    frame_index: usize,
}

/// How wavelet coefficients are ranked for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectionRule {
    /// Always keep the whole coarsest scaling band, then fill by magnitude.
    pub force_scaling: bool,
}

impl SweepSubspace {
    /// Wrap an externally supplied basis; columns must be orthonormal.
    pub fn from_basis(
        basis: DMatrix<f64>,
        provenance: Provenance,
        frame_index: usize,
    ) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(Error::Domain(format!(
                "subspace dimension {} must lie in [1, {}]",
                basis.ncols(),
                basis.nrows()
            )));
        }
        let s = Self {
            basis,
            provenance,
            frame_index,
        };
        let err = s.orthonormality_error();
        if err > 1e-8 {
            return Err(Error::Domain(format!(
                "basis columns are not orthonormal (error {err:e})"
            )));
        }
        Ok(s)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn num_pixels(&self) -> usize {
        self.basis.nrows()
    }

    /// `max |S^T S - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.basis.tr_mul(&self.basis);
        let n = gram.nrows();
        (gram - DMatrix::<f64>::identity(n, n)).amax()
    }

    /// Orthogonal projection onto the span.
    pub fn project(&self, v: DVectorView<'_, f64>) -> DVector<f64> {
        &self.basis * self.basis.tr_mul(&v)
    }
}

/// Orthonormalize the columns of `m` by Householder QR, dropping columns
/// that are numerically dependent on earlier ones.
fn orthonormalize(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let qr = m.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let keep: Vec<usize> = (0..r.ncols().min(r.nrows()))
        .filter(|&k| r[(k, k)].abs() > 1e-10 * scale.max(f64::MIN_POSITIVE))
        .collect();
    (q.select_columns(keep.iter()), keep)
}

/// Rank coefficients by descending magnitude, ties by ascending canonical
/// index.
pub fn rank_coefficients(coeffs: &Coefficients, rule: SelectionRule) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coeffs.values.len()).collect();
    order.sort_by(|&a, &b| {
        coeffs.values[b]
            .abs()
            .total_cmp(&coeffs.values[a].abs())
            .then(a.cmp(&b))
    });
    if rule.force_scaling {
        let layout = &coeffs.layout;
        let mut coarse = layout.band(layout.levels, Orientation::Scaling);
        coarse.sort_unstable();
        let rest: Vec<usize> = order
            .into_iter()
            .filter(|k| coarse.binary_search(k).is_err())
            .collect();
        coarse.extend(rest);
        coarse
    } else {
        order
    }
}

/// Discrete basis function of one coefficient, cropped to the image grid.
pub fn basis_function(layout: &Layout, canonical: usize, bank: &WaveletBank) -> Vec<f64> {
    let mut unit = vec![0.0; layout.num_coefficients()];
    unit[canonical] = 1.0;
    wavelet::inverse(
        &Coefficients {
            layout: *layout,
            values: unit,
        },
        bank,
    )
}

/// Subspace spanned by the wavelet basis functions of the `n` largest
/// coefficients of `frame`.
pub fn build_subspace(
    frame: &ImageGrid,
    bank: &WaveletBank,
    n: usize,
    frame_index: usize,
    rule: SelectionRule,
) -> Result<SweepSubspace> {
    let p = frame.num_pixels();
    if n == 0 || n > p {
        return Err(Error::Domain(format!(
            "subspace dimension {n} must lie in [1, {p}]"
        )));
    }
    let coeffs = wavelet::dwt2_forward(frame, bank);
    let layout = coeffs.layout;
    let chosen: Vec<usize> = rank_coefficients(&coeffs, rule)
        .into_iter()
        .take(n)
        .collect();
    let mut basis = DMatrix::zeros(p, n);
    for (col, &k) in chosen.iter().enumerate() {
        basis.set_column(col, &DVector::from_vec(basis_function(&layout, k, bank)));
    }
    let (basis, chosen) = if layout.is_padded() {
        let (q, keep) = orthonormalize(basis);
        (q, keep.into_iter().map(|c| chosen[c]).collect())
    } else {
        (basis, chosen)
    };
    Ok(SweepSubspace {
        basis,
        provenance: Provenance::Wavelet {
            family: bank.family.name(),
            indices: chosen.into_iter().map(|k| layout.index(k)).collect(),
        },
        frame_index,
    })
}

/// Normalized span of the noiseless distortion of frame `j`.
pub fn oracle_subspace(true_distortions: &DMatrix<f64>, j: usize) -> Result<SweepSubspace> {
    if j >= true_distortions.ncols() {
        return Err(Error::Contract(format!(
            "frame {j} out of range for {} distortion columns",
            true_distortions.ncols()
        )));
    }
    oracle_subspace_from_columns(&true_distortions.columns(j, 1).into_owned(), j)
}

/// Orthonormalized span of several reference profiles for one frame.
pub fn oracle_subspace_from_columns(
    columns: &DMatrix<f64>,
    frame_index: usize,
) -> Result<SweepSubspace> {
    if columns.ncols() == 0 || columns.column_iter().any(|c| c.norm() == 0.0) {
        return Err(Error::Domain(
            "oracle subspace needs non-zero distortion columns".into(),
        ));
    }
    let (basis, _) = orthonormalize(columns.clone());
    Ok(SweepSubspace {
        basis,
        provenance: Provenance::Oracle,
        frame_index,
    })
}

pub fn subspace_file_stem(j: usize) -> String {
    format!("subspace_{j:04}")
}

fn provenance_text(s: &SweepSubspace) -> String {
    let mut out = format!("frame_index={}\nN={}\n", s.frame_index, s.dim());
    match &s.provenance {
        Provenance::Oracle => out.push_str("kind=oracle\n"),
        Provenance::External(text) => {
            out.push_str("kind=external\n");
            for line in text.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        Provenance::Wavelet { family, indices } => {
            let _ = writeln!(out, "kind=wavelet\nfamily={family}");
            let list: Vec<String> = indices
                .iter()
                .map(|ix| {
                    format!(
                        "{}:{}:{}:{}",
                        ix.level,
                        ix.orientation.tag(),
                        ix.row,
                        ix.col
                    )
                })
                .collect();
            let _ = writeln!(out, "indices={}", list.join(","));
        }
    }
    out
}

/// Write `subspace_NNNN.raw` (basis matrix) and `subspace_NNNN.txt`
/// (provenance) into `dir`.
pub fn write_subspace(
    s: &SweepSubspace,
    grid_width: usize,
    grid_height: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = subspace_file_stem(s.frame_index);
    persist::write_raw_matrix(
        &dir.join(format!("{stem}.raw")),
        grid_width,
        grid_height,
        &s.basis,
    )?;
    persist::write_atomic(
        &dir.join(format!("{stem}.txt")),
        provenance_text(s).as_bytes(),
    )
}

pub fn read_subspace(dir: &Path, j: usize) -> Result<SweepSubspace> {
    let stem = subspace_file_stem(j);
    let (_, _, basis) = persist::read_raw_matrix(&dir.join(format!("{stem}.raw")))?;
    let sidecar_path = dir.join(format!("{stem}.txt"));
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let meta = ConfigEntries::parse_str(&text)?;
    let n: usize = meta.require("N")?;
    if n != basis.ncols() {
        return Err(Error::format(
            "N",
            format!("sidecar says {n}, matrix has {}", basis.ncols()),
        ));
    }
    let provenance = match meta.raw("kind") {
        Some(("oracle", _)) => Provenance::Oracle,
        _ => Provenance::External(text.clone()),
    };
    SweepSubspace::from_basis(basis, provenance, j)
}
