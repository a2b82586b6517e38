use super::Volume4D;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// b-values at or below this are treated as unweighted (b0) volumes.
pub const B0_THRESHOLD: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl GradientTable {
    /// Directions with nonzero norm are renormalized to unit length.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::shape(format!(
                "{} b-values but {} gradient directions",
                bvals.len(),
                bvecs.len()
            )));
        }
        if let Some(b) = bvals.iter().find(|&&b| !(b >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative b-value {b}")));
        }
        let mut bvecs = bvecs;
        for (i, g) in bvecs.iter_mut().enumerate() {
            let n = norm(g);
            if n > 0.0 {
                g.iter_mut().for_each(|c| *c /= n);
            } else if bvals[i] > B0_THRESHOLD {
                return Err(Error::InvalidDirection { index: i, norm: n });
            }
        }
        Ok(GradientTable { bvals, bvecs })
    }

    /// A single shell at `b` over `directions`, optionally preceded by `n_b0` unweighted volumes.
    pub fn from_shell(b: f64, directions: &[[f64; 3]], n_b0: usize) -> Result<Self> {
        let mut bvals = vec![0.0; n_b0];
        let mut bvecs = vec![[0.0; 3]; n_b0];
        bvals.extend(std::iter::repeat_n(b, directions.len()));
        bvecs.extend_from_slice(directions);
        Self::new(bvals, bvecs)
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        self.indices_where(|b| b <= B0_THRESHOLD)
    }

    pub fn dwi_indices(&self) -> Vec<usize> {
        self.indices_where(|b| b > B0_THRESHOLD)
    }

    pub fn shell_indices(&self, b_target: f64, tol: f64) -> Vec<usize> {
        self.indices_where(|b| (b - b_target).abs() <= tol)
    }

    fn indices_where(&self, f: impl Fn(f64) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| f(self.bvals[i])).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> GradientTable {
        GradientTable {
            bvals: indices.iter().map(|&i| self.bvals[i]).collect(),
            bvecs: indices.iter().map(|&i| self.bvecs[i]).collect(),
        }
    }

    /// FSL-style text: one line of b-values, three lines of direction components.
    pub fn to_fsl(&self) -> (String, String) {
        let join = |it: &mut dyn Iterator<Item = f64>| {
            it.map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
        };
        let bval = join(&mut self.bvals.iter().copied()) + "\n";
        let bvec = (0..3)
            .map(|r| join(&mut self.bvecs.iter().map(|g| g[r])))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        (bval, bvec)
    }

    pub fn write_fsl(&self, bval_path: &Path, bvec_path: &Path) -> Result<()> {
        let (bval, bvec) = self.to_fsl();
        fs::write(bval_path, bval)?;
        fs::write(bvec_path, bvec)?;
        Ok(())
    }

    pub fn parse_fsl(bval_text: &str, bvec_text: &str) -> Result<Self> {
        let bvals = parse_numbers(bval_text, 0)?;
        let rows: Vec<&str> = bvec_text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 3 {
            return Err(Error::parse(0, format!("bvec file must have 3 rows, found {}", rows.len())));
        }
        let mut offset = 0;
        let mut comps = Vec::with_capacity(3);
        for row in &rows {
            comps.push(parse_numbers(row, offset)?);
            offset += row.len() + 1;
        }
        for (r, c) in comps.iter().enumerate() {
            if c.len() != bvals.len() {
                return Err(Error::shape(format!(
                    "bvec row {r} has {} entries but there are {} b-values",
                    c.len(),
                    bvals.len()
                )));
            }
        }
        let bvecs = (0..bvals.len())
            .map(|i| [comps[0][i], comps[1][i], comps[2][i]])
            .collect();
        Self::new(bvals, bvecs)
    }
}

pub fn read_gradient_table(bval_path: &Path, bvec_path: &Path) -> Result<GradientTable> {
    let bval = fs::read_to_string(bval_path)?;
    let bvec = fs::read_to_string(bvec_path)?;
    GradientTable::parse_fsl(&bval, &bvec)
}

/// Keep volumes whose b-value is within `tol` of `b_target`, in order.
pub fn select_shell(
    v: &Volume4D,
    g: &GradientTable,
    b_target: f64,
    tol: f64,
) -> Result<(Volume4D, GradientTable)> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("shell tolerance must be >= 0, got {tol}")));
    }
    if g.len() != v.channels() {
        return Err(Error::shape(format!(
            "gradient table has {} entries, volume has {} channels",
            g.len(),
            v.channels()
        )));
    }
    let keep = g.shell_indices(b_target, tol);
    if keep.is_empty() {
        return Err(Error::EmptyShell { target: b_target, tol });
    }
    Ok((v.select_channels(&keep)?, g.subset(&keep)))
}

fn parse_numbers(text: &str, base_offset: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut pos = 0;
    for tok in text.split_whitespace() {
        let at = text[pos..].find(tok).map_or(pos, |p| p + pos);
        pos = at + tok.len();
        out.push(
            tok.parse::<f64>()
                .map_err(|_| Error::parse(base_offset + at, format!("not a number: {tok:?}")))?,
        );
    }
    Ok(out)
}

fn norm(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{affine_from_spacing, Intent};

    #[test]
    fn parses_fsl_pair() {
        let g = GradientTable::parse_fsl("0 1000\n", "0 1\n0 0\n0 0\n").unwrap();
        assert_eq!(g.bvals()[1], 1000.0);
        assert_eq!(g.bvecs()[1], [1.0, 0.0, 0.0]);
        assert_eq!(g.bvecs()[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn short_bvec_row_is_shape_error() {
        let err = GradientTable::parse_fsl("0 1000", "0\n0 0\n0 0").unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn wrong_row_count_is_parse_error() {
        let err = GradientTable::parse_fsl("0 1000", "0 1\n0 0").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn garbage_reports_offset() {
        match GradientTable::parse_fsl("0 abc", "0 1\n0 0\n0 0").unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn renormalizes_directions() {
        let g = GradientTable::parse_fsl("1000", "2\n0\n0").unwrap();
        assert_eq!(g.bvecs()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fsl_text_roundtrip() {
        let g = GradientTable::new(vec![0.0, 1000.0], vec![[0.0; 3], [0.6, 0.8, 0.0]]).unwrap();
        let (a, b) = g.to_fsl();
        assert_eq!(GradientTable::parse_fsl(&a, &b).unwrap(), g);
    }

    fn four_volume_case() -> (Volume4D, GradientTable) {
        let g = GradientTable::new(
            vec![0.0, 400.0, 1000.0, 1000.0],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let v = Volume4D::new(
            [1, 1, 1, 4],
            [1.0; 3],
            affine_from_spacing([1.0; 3]),
            vec![10.0, 11.0, 12.0, 13.0],
            Intent::Dwi,
        )
        .unwrap();
        (v, g)
    }

    #[test]
    fn shell_selection() {
        let (v, g) = four_volume_case();
        let (s, gs) = select_shell(&v, &g, 1000.0, 50.0).unwrap();
        assert_eq!(s.data(), &[12.0, 13.0]);
        assert_eq!(gs.len(), 2);
        let (s0, _) = select_shell(&v, &g, 0.0, 50.0).unwrap();
        assert_eq!(s0.data(), &[10.0]);
        assert!(matches!(select_shell(&v, &g, 2600.0, 50.0), Err(Error::EmptyShell { .. })));
    }

    #[test]
    fn shell_selection_is_idempotent() {
        let (v, g) = four_volume_case();
        let once = select_shell(&v, &g, 1000.0, 50.0).unwrap();
        let twice = select_shell(&once.0, &once.1, 1000.0, 50.0).unwrap();
        assert_eq!(once, twice);
    }
}
