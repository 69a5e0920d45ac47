//! Periodic cell-centered grid and the packed model state.
//!
//! A state holds the three shallow-water fields (water height `h` and the
//! velocity components `u`, `v`) on a `q`-by-`q` grid of cell centers over a
//! square domain. The packed layout is variable-major and row-major within a
//! field, so `h` occupies indices `0..q*q`, `u` the next block, `v` the last.
//! Everything downstream (covariance blocks, observation selection, CSV
//! output) relies on this one layout, so it lives here and nowhere else.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("invalid grid dimension: {0}")]
    InvalidDimension(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("state length {got} does not match grid ({expected})")]
    LengthMismatch { got: usize, expected: usize },
    #[error("CSV parse error at line {line}, field {field}: {message}")]
    CsvParse {
        line: usize,
        field: usize,
        message: String,
    },
}

/// The three prognostic variables, in packed-layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    H,
    U,
    V,
}

impl Var {
    pub const ALL: [Var; 3] = [Var::H, Var::U, Var::V];

    pub fn name(self) -> &'static str {
        match self {
            Var::H => "h",
            Var::U => "u",
            Var::V => "v",
        }
    }

    /// Position of this variable's block in the packed layout.
    pub fn block(self) -> usize {
        match self {
            Var::H => 0,
            Var::U => 1,
            Var::V => 2,
        }
    }
}

/// Square periodic grid of cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    q: usize,
    domain_min: f64,
    domain_max: f64,
    dx: f64,
    dy: f64,
}

impl Grid {
    /// `q` cells per side on `[domain_min, domain_max]^2`; requires `q >= 3`
    /// (the scheme's stencil needs three distinct cells per direction).
    pub fn new(q: usize, domain_min: f64, domain_max: f64) -> Result<Grid, StateError> {
        if q < 3 {
            return Err(StateError::InvalidDimension(format!(
                "q = {q}, need at least 3 cells per side"
            )));
        }
        if !(domain_max > domain_min) || !domain_min.is_finite() || !domain_max.is_finite() {
            return Err(StateError::InvalidDimension(format!(
                "domain [{domain_min}, {domain_max}] is not a finite non-empty interval"
            )));
        }
        let dx = (domain_max - domain_min) / q as f64;
        Ok(Grid {
            q,
            domain_min,
            domain_max,
            dx,
            dy: dx,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn domain_min(&self) -> f64 {
        self.domain_min
    }

    pub fn domain_max(&self) -> f64 {
        self.domain_max
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Number of cells in one field.
    pub fn cells(&self) -> usize {
        self.q * self.q
    }

    /// Total packed state length (three fields).
    pub fn state_len(&self) -> usize {
        3 * self.cells()
    }

    pub fn x_center(&self, i: usize) -> f64 {
        self.domain_min + (i as f64 + 0.5) * self.dx
    }

    pub fn y_center(&self, j: usize) -> f64 {
        self.domain_min + (j as f64 + 0.5) * self.dy
    }

    /// Flat index of cell `(i, j)` within one field.
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.q + j
    }

    /// Packed index of `(var, i, j)`; variable-major, row-major within a field.
    pub fn state_index(&self, var: Var, i: usize, j: usize) -> Result<usize, StateError> {
        if i >= self.q || j >= self.q {
            return Err(StateError::IndexOutOfRange(format!(
                "cell ({i}, {j}) on a {q}x{q} grid",
                q = self.q
            )));
        }
        Ok(var.block() * self.cells() + self.cell_index(i, j))
    }

    /// Inverse of [`Grid::state_index`].
    pub fn unpack_index(&self, idx: usize) -> Result<(Var, usize, usize), StateError> {
        if idx >= self.state_len() {
            return Err(StateError::IndexOutOfRange(format!(
                "packed index {idx} on a grid with {} entries",
                self.state_len()
            )));
        }
        let var = Var::ALL[idx / self.cells()];
        let cell = idx % self.cells();
        Ok((var, cell / self.q, cell % self.q))
    }

    /// Variable owning a packed index.
    pub fn var_of_index(&self, idx: usize) -> Result<Var, StateError> {
        Ok(self.unpack_index(idx)?.0)
    }
}

/// Packed model state on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    grid: Grid,
    values: Vec<f64>,
}

impl StateVector {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<StateVector, StateError> {
        if values.len() != grid.state_len() {
            return Err(StateError::LengthMismatch {
                got: values.len(),
                expected: grid.state_len(),
            });
        }
        Ok(StateVector { grid, values })
    }

    pub fn zeros(grid: Grid) -> StateVector {
        StateVector {
            grid,
            values: vec![0.0; grid.state_len()],
        }
    }

    pub fn uniform(grid: Grid, h: f64, u: f64, v: f64) -> StateVector {
        let cells = grid.cells();
        let mut values = Vec::with_capacity(3 * cells);
        values.extend(std::iter::repeat(h).take(cells));
        values.extend(std::iter::repeat(u).take(cells));
        values.extend(std::iter::repeat(v).take(cells));
        StateVector { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Read-only view of one variable's q-by-q field.
    pub fn field(&self, var: Var) -> FieldSlice<'_> {
        let cells = self.grid.cells();
        let start = var.block() * cells;
        FieldSlice {
            grid: self.grid,
            data: &self.values[start..start + cells],
        }
    }

    /// Mutable view of one variable's q-by-q field.
    pub fn field_mut(&mut self, var: Var) -> FieldSliceMut<'_> {
        let cells = self.grid.cells();
        let start = var.block() * cells;
        FieldSliceMut {
            grid: self.grid,
            data: &mut self.values[start..start + cells],
        }
    }

    pub fn get(&self, var: Var, i: usize, j: usize) -> f64 {
        self.values[var.block() * self.grid.cells() + self.grid.cell_index(i, j)]
    }

    pub fn set(&mut self, var: Var, i: usize, j: usize, value: f64) {
        self.values[var.block() * self.grid.cells() + self.grid.cell_index(i, j)] = value;
    }

    /// Discrete volume of the height field, `sum(h) * dx * dy`.
    pub fn total_volume(&self) -> f64 {
        let h: f64 = self.field(Var::H).data().iter().sum();
        h * self.grid.dx() * self.grid.dy()
    }

    pub fn norm(&self) -> f64 {
        crate::vecmath::norm(&self.values)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &StateVector) {
        crate::vecmath::axpy(alpha, &other.values, &mut self.values);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Borrowed q-by-q view of one field inside a [`StateVector`].
#[derive(Debug, Clone, Copy)]
pub struct FieldSlice<'a> {
    grid: Grid,
    data: &'a [f64],
}

impl<'a> FieldSlice<'a> {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.cell_index(i, j)]
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }
}

#[derive(Debug)]
pub struct FieldSliceMut<'a> {
    grid: Grid,
    data: &'a mut [f64],
}

impl<'a> FieldSliceMut<'a> {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.cell_index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[self.grid.cell_index(i, j)] = value;
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.data
    }

    pub fn fill_with(&mut self, mut f: impl FnMut(f64, f64) -> f64) {
        for i in 0..self.grid.q() {
            for j in 0..self.grid.q() {
                let v = f(self.grid.x_center(i), self.grid.y_center(j));
                self.set(i, j, v);
            }
        }
    }
}

const CSV_HEADER: &str = "x,y,h,u,v";

/// Format a real with 17 significant digits, enough for an exact f64 round
/// trip through text.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serialize a state as `x,y,h,u,v` rows (LF line endings, one row per cell,
/// cells in row-major order). Field values survive the round trip bit-exactly.
pub fn encode_field_csv(state: &StateVector) -> String {
    let grid = state.grid();
    let q = grid.q();
    let mut out = String::with_capacity(64 * (q * q + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    let h = state.field(Var::H);
    let u = state.field(Var::U);
    let v = state.field(Var::V);
    for i in 0..q {
        for j in 0..q {
            out.push_str(&format_real(grid.x_center(i)));
            out.push(',');
            out.push_str(&format_real(grid.y_center(j)));
            out.push(',');
            out.push_str(&format_real(h.get(i, j)));
            out.push(',');
            out.push_str(&format_real(u.get(i, j)));
            out.push(',');
            out.push_str(&format_real(v.get(i, j)));
            out.push('\n');
        }
    }
    out
}

/// Parse text produced by [`encode_field_csv`] back into a state.
pub fn decode_field_csv(text: &str) -> Result<StateVector, StateError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(StateError::CsvParse {
                line: 1,
                field: 1,
                message: format!("expected header '{CSV_HEADER}', found '{header}'"),
            })
        }
        None => {
            return Err(StateError::CsvParse {
                line: 1,
                field: 1,
                message: "empty input".to_string(),
            })
        }
    }

    let mut rows: Vec<[f64; 5]> = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut row = [0.0f64; 5];
        let mut fields = line.split(',');
        for (k, slot) in row.iter_mut().enumerate() {
            let raw = fields.next().ok_or(StateError::CsvParse {
                line: lineno + 1,
                field: k + 1,
                message: "missing field".to_string(),
            })?;
            let value: f64 = raw.trim().parse().map_err(|e| StateError::CsvParse {
                line: lineno + 1,
                field: k + 1,
                message: format!("'{raw}': {e}"),
            })?;
            if !value.is_finite() {
                return Err(StateError::CsvParse {
                    line: lineno + 1,
                    field: k + 1,
                    message: format!("non-finite value '{raw}'"),
                });
            }
            *slot = value;
        }
        if fields.next().is_some() {
            return Err(StateError::CsvParse {
                line: lineno + 1,
                field: 6,
                message: "too many fields".to_string(),
            });
        }
        rows.push(row);
    }

    let q = (rows.len() as f64).sqrt().round() as usize;
    if q * q != rows.len() {
        return Err(StateError::InvalidDimension(format!(
            "{} data rows is not a square cell count",
            rows.len()
        )));
    }
    if q < 3 {
        return Err(StateError::InvalidDimension(format!(
            "decoded grid would have q = {q}, need at least 3"
        )));
    }

    let xs: Vec<f64> = (0..q).map(|i| rows[i * q][0]).collect();
    let grid = recover_grid(&xs, q)?;

    let mut state = StateVector::zeros(grid);
    for i in 0..q {
        for j in 0..q {
            let row = &rows[i * q + j];
            state.set(Var::H, i, j, row[2]);
            state.set(Var::U, i, j, row[3]);
            state.set(Var::V, i, j, row[4]);
        }
    }
    Ok(state)
}

/// Rebuild the grid from the distinct x coordinates of a decoded file.
///
/// The encoder writes `x_i = domain_min + (i + 0.5) * dx` with
/// `dx = (domain_max - domain_min) / q`, each value rounded once. A naive
/// reconstruction can land an ulp away and then re-encode differently, so we
/// search the few-ulp neighbourhood of the obvious estimates for parameters
/// that regenerate every coordinate bit-exactly, and give up to a plain
/// estimate if none match (values still decode correctly in that case).
fn recover_grid(xs: &[f64], q: usize) -> Result<Grid, StateError> {
    let x0 = xs[0];
    let span = xs[q - 1] - x0;
    if !(span > 0.0) {
        return Err(StateError::InvalidDimension(
            "x coordinates are not increasing".to_string(),
        ));
    }
    let dx0 = span / (q - 1) as f64;

    for dx in ulp_neighborhood(dx0, 3) {
        for dmin in ulp_neighborhood(x0 - 0.5 * dx, 3) {
            for dmax in ulp_neighborhood(dmin + q as f64 * dx, 2) {
                if !(dmax > dmin) {
                    continue;
                }
                // The constructor recomputes dx; require full consistency.
                if (dmax - dmin) / q as f64 != dx {
                    continue;
                }
                let exact = (0..q).all(|i| dmin + (i as f64 + 0.5) * dx == xs[i]);
                if exact {
                    return Grid::new(q, dmin, dmax);
                }
            }
        }
    }
    // No bit-exact parameters found; fall back to the direct estimate.
    Grid::new(q, x0 - 0.5 * dx0, x0 - 0.5 * dx0 + q as f64 * dx0)
}

fn ulp_neighborhood(x: f64, radius: usize) -> Vec<f64> {
    let mut out = vec![x];
    let mut up = x;
    let mut down = x;
    for _ in 0..radius {
        up = up.next_up();
        down = down.next_down();
        out.push(up);
        out.push(down);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spacing_matches_expected_values() {
        let g = Grid::new(40, -3.0, 3.0).unwrap();
        assert_eq!(g.dx(), 0.15);
        assert_eq!(g.dy(), 0.15);
        assert_eq!(g.state_len(), 4800);
        assert_eq!(g.x_center(0), -3.0 + 0.5 * 0.15);

        let g = Grid::new(3, 0.0, 3.0).unwrap();
        assert_eq!(g.dx(), 1.0);
    }

    #[test]
    fn grid_rejects_bad_dimensions() {
        assert!(Grid::new(2, 0.0, 1.0).is_err());
        assert!(Grid::new(10, 1.0, 1.0).is_err());
        assert!(Grid::new(10, 2.0, -2.0).is_err());
    }

    #[test]
    fn packed_index_corners() {
        let g = Grid::new(40, -3.0, 3.0).unwrap();
        assert_eq!(g.state_index(Var::H, 0, 0).unwrap(), 0);
        assert_eq!(g.state_index(Var::V, 39, 39).unwrap(), 4799);
        assert!(g.state_index(Var::H, 40, 0).is_err());
        assert!(g.state_index(Var::U, 0, 40).is_err());
    }

    #[test]
    fn packed_index_is_a_bijection() {
        let g = Grid::new(5, -1.0, 1.0).unwrap();
        let mut seen = vec![false; g.state_len()];
        for var in Var::ALL {
            for i in 0..5 {
                for j in 0..5 {
                    let idx = g.state_index(var, i, j).unwrap();
                    assert!(!seen[idx], "index {idx} hit twice");
                    seen[idx] = true;
                    assert_eq!(g.unpack_index(idx).unwrap(), (var, i, j));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn field_views_share_the_packed_layout() {
        let g = Grid::new(4, 0.0, 4.0).unwrap();
        let mut s = StateVector::zeros(g);
        s.set(Var::U, 2, 1, 7.5);
        assert_eq!(s.values()[g.state_index(Var::U, 2, 1).unwrap()], 7.5);
        assert_eq!(s.field(Var::U).get(2, 1), 7.5);
    }

    #[test]
    fn uniform_state_encodes_to_expected_row_count() {
        let g = Grid::new(3, 0.0, 3.0).unwrap();
        let s = StateVector::uniform(g, 1.0, 0.0, 0.0);
        let text = encode_field_csv(&s);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10, "header plus 9 data rows");
        assert_eq!(lines[0], "x,y,h,u,v");
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = Grid::new(6, -3.0, 3.0).unwrap();
        let mut s = StateVector::zeros(g);
        // Awkward values: irrationals, subnormals, huge magnitudes, negatives.
        let specials = [
            std::f64::consts::PI,
            -std::f64::consts::E,
            5e-324,
            -1.2345678901234567e300,
            1.0 / 3.0,
            -0.0,
        ];
        for (k, v) in s.values_mut().iter_mut().enumerate() {
            *v = specials[k % specials.len()] * (1.0 + k as f64 * 1e-3);
        }
        let decoded = decode_field_csv(&encode_field_csv(&s)).unwrap();
        assert_eq!(decoded.grid(), g);
        for (a, b) in s.values().iter().zip(decoded.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        for (q, lo, hi) in [(3, 0.0, 3.0), (6, -3.0, 3.0), (10, -3.0, 3.0), (40, -3.0, 3.0)] {
            let g = Grid::new(q, lo, hi).unwrap();
            let mut s = StateVector::uniform(g, 1.0, 0.0, 0.0);
            s.field_mut(Var::H)
                .fill_with(|x, y| 1.0 + (-(x * x + y * y) / 0.5).exp());
            let t = encode_field_csv(&s);
            let t2 = encode_field_csv(&decode_field_csv(&t).unwrap());
            assert_eq!(t, t2, "re-encoding differs for q = {q}");
        }
    }

    #[test]
    fn decode_reports_parse_location() {
        let g = Grid::new(3, 0.0, 3.0).unwrap();
        let mut text = encode_field_csv(&StateVector::uniform(g, 1.0, 0.0, 0.0));
        text = text.replacen("1.0000000000000000e0", "not-a-number", 1);
        match decode_field_csv(&text) {
            Err(StateError::CsvParse { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_non_square_row_counts() {
        let g = Grid::new(3, 0.0, 3.0).unwrap();
        let mut text = encode_field_csv(&StateVector::uniform(g, 1.0, 0.0, 0.0));
        let cut = text.rfind("0.0").unwrap();
        text.truncate(text[..cut].rfind('\n').unwrap() + 1);
        assert!(matches!(
            decode_field_csv(&text),
            Err(StateError::InvalidDimension(_))
        ));
    }

    #[test]
    fn total_volume_scales_with_cell_area() {
        let g = Grid::new(3, 0.0, 3.0).unwrap();
        let s = StateVector::uniform(g, 2.0, 0.0, 0.0);
        assert!((s.total_volume() - 2.0 * 9.0).abs() < 1e-14);
    }
}
