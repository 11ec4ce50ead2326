//! Uniform partitions of an interval, piecewise-constant densities on them,
//! and the on-disk formats shared by densities and matrices.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::Interval;
use crate::quadrature::gauss_legendre_8;

/// Uniform partition of `interval` into `n_cells` cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub interval: Interval,
    pub n_cells: usize,
}

impl Grid {
    pub fn new(interval: Interval, n_cells: usize) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        if !(interval.hi > interval.lo) || !interval.lo.is_finite() || !interval.hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid interval [{}, {}] is empty",
                interval.lo, interval.hi
            )));
        }
        Ok(Grid { interval, n_cells })
    }

    pub fn width(&self) -> f64 {
        self.interval.len() / self.n_cells as f64
    }

    /// Left edge of cell `i`; `edge(n_cells)` is the right end of the interval.
    pub fn edge(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.interval.hi
        } else {
            self.interval.lo + self.width() * i as f64
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.interval.lo + self.width() * (i as f64 + 0.5)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// Cell containing `x`; the right end belongs to the last cell.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.interval.lo && x <= self.interval.hi) {
            return None;
        }
        let k = ((x - self.interval.lo) / self.width()).floor() as usize;
        Some(k.min(self.n_cells - 1))
    }

    /// Cell index of `x`, clamped to the grid.
    pub fn clamped_cell(&self, x: f64) -> usize {
        if x <= self.interval.lo {
            0
        } else {
            self.cell_of(x).unwrap_or(self.n_cells - 1)
        }
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n_cells == other.n_cells
            && (self.interval.lo - other.interval.lo).abs() <= 1e-12 * self.width()
            && (self.interval.hi - other.interval.hi).abs() <= 1e-12 * self.width()
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "[{}, {}]x{} vs [{}, {}]x{}",
                self.interval.lo,
                self.interval.hi,
                self.n_cells,
                other.interval.lo,
                other.interval.hi,
                other.n_cells
            )))
        }
    }

    /// Grid with the same cell width extended by at least `pad` on each side.
    pub fn extended(&self, pad: f64) -> Grid {
        let extra = if pad > 0.0 {
            (pad / self.width() - 1e-9).ceil().max(0.0) as usize
        } else {
            0
        };
        let h = self.width();
        Grid {
            interval: Interval::new(
                self.interval.lo - h * extra as f64,
                self.interval.hi + h * extra as f64,
            ),
            n_cells: self.n_cells + 2 * extra,
        }
    }

    /// Cell averages `(1/h)∫_cell f`, by 8-point Gauss–Legendre per cell.
    pub fn cell_averages<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        let h = self.width();
        (0..self.n_cells)
            .map(|i| {
                gauss_legendre_8(self.edge(i), self.edge(i + 1))
                    .iter()
                    .map(|&(x, w)| w * f(x))
                    .sum::<f64>()
                    / h
            })
            .collect()
    }
}

/// Piecewise-constant probability density: `weights[i]` is the density on cell `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub grid: Grid,
    pub weights: Vec<f64>,
}

impl GridDensity {
    /// Wraps nonnegative weights and rescales them to unit mass.
    pub fn new(grid: Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.n_cells {
            return Err(Error::GridMismatch(format!(
                "{} weights for {} cells",
                weights.len(),
                grid.n_cells
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("density weights must be finite and nonnegative".into()));
        }
        let mut d = GridDensity { grid, weights };
        let mass = d.mass();
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("density has zero mass".into()));
        }
        d.scale(1.0 / mass);
        Ok(d)
    }

    /// Density from per-cell masses (probabilities).
    pub fn from_masses(grid: Grid, masses: Vec<f64>) -> Result<Self> {
        let h = grid.width();
        Self::new(grid, masses.into_iter().map(|m| m / h).collect())
    }

    pub fn uniform(grid: Grid) -> Self {
        let w = 1.0 / grid.interval.len();
        GridDensity {
            grid,
            weights: vec![w; grid.n_cells],
        }
    }

    /// All mass in the cell containing `x`.
    pub fn point_mass(grid: Grid, x: f64) -> Result<Self> {
        let k = grid
            .cell_of(x)
            .ok_or(Error::Domain { what: "point mass location", value: x })?;
        let mut weights = vec![0.0; grid.n_cells];
        weights[k] = 1.0 / grid.width();
        Ok(GridDensity { grid, weights })
    }

    /// Normalized histogram of `samples`; samples off the grid are an error.
    pub fn histogram(grid: Grid, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("histogram of an empty sample".into()));
        }
        let mut counts = vec![0.0; grid.n_cells];
        for &z in samples {
            let k = grid
                .cell_of(z)
                .ok_or(Error::Domain { what: "sample outside histogram grid", value: z })?;
            counts[k] += 1.0;
        }
        Self::from_masses(grid, counts)
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.grid.width()
    }

    pub fn masses(&self) -> Vec<f64> {
        let h = self.grid.width();
        self.weights.iter().map(|w| w * h).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
    }

    /// `∫ f dμ` with `f` integrated exactly enough by GL8 on each cell.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let avg = self.grid.cell_averages(f);
        let h = self.grid.width();
        avg.iter().zip(&self.weights).map(|(a, w)| a * w * h).sum()
    }

    pub fn mean(&self) -> f64 {
        let h = self.grid.width();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * h * self.grid.center(i))
            .sum()
    }

    /// `∫|f - g|`.
    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.width())
    }

    pub fn tv_distance(&self, other: &GridDensity) -> Result<f64> {
        Ok(0.5 * self.l1_distance(other)?)
    }

    /// Probability assigned to `[lo, hi]`, counting partial cells by overlap.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.grid.n_cells {
            let a = self.grid.edge(i).max(lo);
            let b = self.grid.edge(i + 1).min(hi);
            if b > a {
                total += self.weights[i] * (b - a);
            }
        }
        total
    }

    /// Cumulative masses at the right edge of each cell.
    pub fn cdf_at_edges(&self) -> Vec<f64> {
        let h = self.grid.width();
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w * h;
                acc
            })
            .collect()
    }

    /// Draw from the density: pick a cell by mass, then a uniform point in it.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let cdf = self.cdf_at_edges();
        let total = *cdf.last().unwrap_or(&1.0);
        let u: f64 = rng.random::<f64>() * total;
        let k = cdf.partition_point(|&c| c <= u).min(self.grid.n_cells - 1);
        self.grid.edge(k) + self.grid.width() * rng.random::<f64>()
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("cell,lo,hi,density\n");
        for (i, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", i, self.grid.edge(i), self.grid.edge(i + 1), w));
        }
        out
    }
}

/// What a binary container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Density = 0,
    PlainMatrix = 1,
    HoleMatrix = 2,
}

impl ContainerKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(ContainerKind::Density),
            1 => Ok(ContainerKind::PlainMatrix),
            2 => Ok(ContainerKind::HoleMatrix),
            other => Err(Error::InvalidArgument(format!("unknown container kind {other}"))),
        }
    }
}

const MAGIC: &[u8; 4] = b"ULAM";
const VERSION: u32 = 1;

/// Row-major real array on a grid, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub rows: usize,
    pub cols: usize,
    pub interval: Interval,
    pub data: Vec<f64>,
}

impl Container {
    /// Layout: `ULAM`, version u32, kind u32, rows u64, cols u64, lo f64, hi f64,
    /// then `rows*cols` f64 values, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        w.write_all(&self.interval.lo.to_le_bytes())?;
        w.write_all(&self.interval.hi.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidArgument("not a ULAM container".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::InvalidArgument(format!("unsupported container version {version}")));
        }
        let kind = ContainerKind::from_u32(read_u32(&mut r)?)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let lo = read_f64(&mut r)?;
        let hi = read_f64(&mut r)?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument("container dimensions overflow".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(&mut r)?);
        }
        Ok(Container {
            kind,
            rows,
            cols,
            interval: Interval::new(lo, hi),
            data,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl GridDensity {
    pub fn to_container(&self) -> Container {
        Container {
            kind: ContainerKind::Density,
            rows: 1,
            cols: self.grid.n_cells,
            interval: self.grid.interval,
            data: self.weights.clone(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Density || c.rows != 1 {
            return Err(Error::InvalidArgument("container does not hold a density".into()));
        }
        GridDensity::new(Grid::new(c.interval, c.cols)?, c.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Grid {
        Grid::new(Interval::new(0.0, 1.0), n).unwrap()
    }

    #[test]
    fn cell_lookup_and_edges() {
        let g = unit_grid(4);
        assert_eq!(g.cell_of(0.0), Some(0));
        assert_eq!(g.cell_of(0.26), Some(1));
        assert_eq!(g.cell_of(1.0), Some(3));
        assert_eq!(g.cell_of(1.01), None);
        assert_eq!(g.edge(4), 1.0);
        assert!((g.center(1) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn extension_keeps_alignment() {
        let g = unit_grid(10);
        let e = g.extended(0.25);
        assert_eq!(e.n_cells, 16);
        assert!((e.width() - g.width()).abs() < 1e-15);
        assert!((e.edge(3) - g.edge(0)).abs() < 1e-14);
    }

    #[test]
    fn histogram_normalizes() {
        let d = GridDensity::histogram(unit_grid(4), &[0.1, 0.1, 0.6, 0.9]).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-14);
        assert!((d.weights[0] - 2.0).abs() < 1e-14);
        assert_eq!(d.weights[1], 0.0);
    }

    #[test]
    fn container_roundtrip() {
        let d = GridDensity::new(unit_grid(5), vec![1.0, 2.0, 3.0, 0.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        d.to_container().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ULAM");
        let back = GridDensity::from_container(&Container::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn mass_in_partial_cells() {
        let d = GridDensity::uniform(unit_grid(4));
        assert!((d.mass_in(0.1, 0.35) - 0.25).abs() < 1e-14);
    }
}
