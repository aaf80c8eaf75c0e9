//! Grouped data and its CSV form.
//!
//! The CSV header is `group,y,x1..xp,z1..zq`, one row per observation, rows
//! sorted by integer group id, every group exactly `m` rows long.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    groups: Vec<Group>,
    m: usize,
    p: usize,
    q: usize,
}

impl GroupedDataset {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset has no groups".into()))?;
        let (m, p, q) = (first.y.len(), first.x.ncols(), first.z.ncols());
        if m == 0 || p == 0 {
            return Err(Error::InvalidInput(format!(
                "need m > 0 and p > 0, got m = {m}, p = {p}"
            )));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.y.len() != m
                || g.x.nrows() != m
                || g.z.nrows() != m
                || g.x.ncols() != p
                || g.z.ncols() != q
            {
                return Err(Error::DimensionMismatch(format!(
                    "group {i}: y {}, X {}x{}, Z {}x{}; expected m = {m}, p = {p}, q = {q}",
                    g.y.len(),
                    g.x.nrows(),
                    g.x.ncols(),
                    g.z.nrows(),
                    g.z.ncols()
                )));
            }
        }
        Ok(Self { groups, m, p, q })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Group] {
        &mut self.groups
    }

    pub fn n(&self) -> usize {
        self.groups.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_obs(&self) -> usize {
        self.n() * self.m
    }

    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_obs(), self.p);
        for (i, g) in self.groups.iter().enumerate() {
            out.rows_mut(i * self.m, self.m).copy_from(&g.x);
        }
        out
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_obs());
        for (i, g) in self.groups.iter().enumerate() {
            out.rows_mut(i * self.m, self.m).copy_from(&g.y);
        }
        out
    }

    /// Numerical column rank of the stacked fixed-effect design.
    pub fn design_rank(&self) -> usize {
        let x = self.stacked_x();
        let svd = x.svd(false, false);
        let smax = svd.singular_values.max();
        let tol = smax * f64::EPSILON * self.n_obs().max(self.p) as f64;
        svd.singular_values.iter().filter(|s| **s > tol).count()
    }

    pub fn check_full_rank(&self) -> Result<()> {
        let rank = self.design_rank();
        if rank < self.p {
            return Err(Error::RankDeficientDesign {
                rank,
                required: self.p,
            });
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["group".to_string(), "y".to_string()];
        header.extend((1..=self.p).map(|k| format!("x{k}")));
        header.extend((1..=self.q).map(|k| format!("z{k}")));
        w.write_record(&header).map_err(csv_err)?;
        let mut row = Vec::with_capacity(header.len());
        for (i, g) in self.groups.iter().enumerate() {
            for j in 0..self.m {
                row.clear();
                row.push((i + 1).to_string());
                row.push(g.y[j].to_string());
                row.extend((0..self.p).map(|k| g.x[(j, k)].to_string()));
                row.extend((0..self.q).map(|k| g.z[(j, k)].to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "group" || cols[1] != "y" {
            return Err(Error::Format {
                line: 1,
                message: "header must start with `group,y`".into(),
            });
        }
        let p = cols[2..].iter().take_while(|c| c.starts_with('x')).count();
        let q = cols.len() - 2 - p;
        for (k, c) in cols[2..2 + p].iter().enumerate() {
            if *c != format!("x{}", k + 1) {
                return Err(Error::Format {
                    line: 1,
                    message: format!("expected column x{}, found `{c}`", k + 1),
                });
            }
        }
        for (k, c) in cols[2 + p..].iter().enumerate() {
            if *c != format!("z{}", k + 1) {
                return Err(Error::Format {
                    line: 1,
                    message: format!("expected column z{}, found `{c}`", k + 1),
                });
            }
        }

        // (group id, rows of (y, x.., z..)) in file order
        let mut runs: Vec<(i64, Vec<Vec<f64>>)> = Vec::new();
        for (idx, rec) in r.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(csv_err)?;
            if rec.len() != cols.len() {
                return Err(Error::Format {
                    line,
                    message: format!("expected {} fields, found {}", cols.len(), rec.len()),
                });
            }
            let id: i64 = rec[0].trim().parse().map_err(|_| Error::Format {
                line,
                message: format!("group id `{}` is not an integer", &rec[0]),
            })?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| Error::Format {
                        line,
                        message: format!("`{s}` is not a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            match runs.last_mut() {
                Some((last, rows)) if *last == id => rows.push(vals),
                Some((last, _)) if *last > id => {
                    return Err(Error::Format {
                        line,
                        message: format!("group ids not sorted: {id} after {last}"),
                    })
                }
                _ => runs.push((id, vec![vals])),
            }
        }
        let m = runs
            .first()
            .map(|(_, rows)| rows.len())
            .ok_or_else(|| Error::Format {
                line: 2,
                message: "no data rows".into(),
            })?;
        let mut groups = Vec::with_capacity(runs.len());
        for (id, rows) in runs {
            if rows.len() != m {
                return Err(Error::Format {
                    line: 0,
                    message: format!("ragged groups: group {id} has {} rows, expected {m}", rows.len()),
                });
            }
            let y = DVector::from_iterator(m, rows.iter().map(|r| r[0]));
            let x = DMatrix::from_fn(m, p, |j, k| rows[j][1 + k]);
            let z = DMatrix::from_fn(m, q, |j, k| rows[j][1 + p + k]);
            groups.push(Group { y, x, z });
        }
        Self::new(groups)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Format {
        line,
        message: e.to_string(),
    }
}
