//! Delimited text in and out. Missing cells are empty, `NA` or `nan`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use emenv_core::data::ObservedDataset;
use emenv_core::Mat;

use crate::error::{AppError, AppResult};

fn is_missing_token(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
}

/// Tab when the header has a tab and no comma, otherwise comma.
pub fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') && !header.contains(',') {
        b'\t'
    } else {
        b','
    }
}

/// A parsed table: header names and cells, `NaN` where missing.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> AppResult<Table> {
        if !path.is_file() {
            return Err(AppError::DataFileNotFound(path.to_path_buf()));
        }
        let mut first = String::new();
        BufReader::new(File::open(path)?).read_line(&mut first)?;
        let delim = detect_delimiter(first.trim_end_matches(['\r', '\n']));
        let mut rdr = csv::ReaderBuilder::new().delimiter(delim).trim(csv::Trim::All).from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(headers.len());
            for (j, field) in rec.iter().enumerate() {
                if is_missing_token(field) {
                    row.push(f64::NAN);
                    continue;
                }
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        return Err(AppError::NonNumericCell {
                            row: i + 1,
                            column: headers.get(j).cloned().unwrap_or_default(),
                            value: field.to_string(),
                        })
                    }
                }
            }
            cells.push(row);
        }
        Ok(Table { headers, cells })
    }

    fn column_index(&self, name: &str) -> AppResult<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| AppError::MissingColumn(name.to_string()))
    }

    fn gather(&self, names: &[String]) -> AppResult<Mat> {
        let idx = names.iter().map(|n| self.column_index(n)).collect::<AppResult<Vec<_>>>()?;
        Ok(Mat::from_fn(self.cells.len(), idx.len(), |i, j| self.cells[i][idx[j]]))
    }

    /// Dataset with predictors and responses in the order listed.
    pub fn dataset(&self, x_cols: &[String], y_cols: &[String]) -> AppResult<ObservedDataset> {
        let x = self.gather(x_cols)?;
        let y = self.gather(y_cols)?;
        Ok(ObservedDataset::with_names(x, y, x_cols.to_vec(), y_cols.to_vec())?)
    }
}

pub fn load_table(path: &Path, x_cols: &[String], y_cols: &[String]) -> AppResult<ObservedDataset> {
    Table::read(path)?.dataset(x_cols, y_cols)
}

/// Seventeen significant digits, or `NA`.
pub fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn write_dataset<W: Write>(out: W, ds: &ObservedDataset, delimiter: u8) -> AppResult<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
    w.write_record(ds.x_names().iter().chain(ds.y_names()))?;
    for i in 0..ds.n() {
        let row = (0..ds.p() + ds.r()).map(|c| format_cell(ds.value(i, c)));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_table(path: &Path, ds: &ObservedDataset, delimiter: u8) -> AppResult<()> {
    write_dataset(File::create(path)?, ds, delimiter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn one_na_gives_one_missing_cell() {
        let f = write_tmp("x1,y1,y2\n1,2,3\n4,5,NA\n7,8,9\n");
        let ds = load_table(f.path(), &names(&["x1"]), &names(&["y1", "y2"])).unwrap();
        let missing: usize = (0..3).map(|i| (0..3).filter(|&c| !ds.is_observed(i, c)).count()).sum();
        assert_eq!(missing, 1);
        assert!(!ds.is_observed(1, 2));
    }

    #[test]
    fn tabs_tokens_and_column_order() {
        let f = write_tmp("a\tb\tc\n1\tnan\t3\n\t5\tna\n7\t8\t9\n");
        let ds = load_table(f.path(), &names(&["c"]), &names(&["b", "a"])).unwrap();
        assert_eq!(ds.x()[(0, 0)], 3.0);
        assert!(ds.y()[(0, 0)].is_nan());
        assert!(ds.y()[(1, 1)].is_nan());
        assert!(ds.x()[(1, 0)].is_nan());
    }

    #[test]
    fn errors_are_specific() {
        let f = write_tmp("x1,y1\n1,2\nNA,3\nNA,4\n");
        assert!(matches!(load_table(f.path(), &names(&["x2"]), &names(&["y1"])), Err(AppError::MissingColumn(c)) if c == "x2"));
        let g = write_tmp("x1,y1\n1,2\nNA,NA\n");
        assert!(matches!(
            load_table(g.path(), &names(&["x1"]), &names(&["y1"])),
            Err(AppError::Core(emenv_core::Error::AllMissingRow(_)))
        ));
        let h = write_tmp("x1,y1\nNA,2\nNA,3\n");
        assert!(matches!(
            load_table(h.path(), &names(&["x1"]), &names(&["y1"])),
            Err(AppError::Core(emenv_core::Error::AllMissingColumn(_)))
        ));
        let k = write_tmp("x1,y1\n1,abc\n");
        assert!(matches!(load_table(k.path(), &names(&["x1"]), &names(&["y1"])), Err(AppError::NonNumericCell { row: 1, .. })));
        let missing = Path::new("/definitely/not/here.csv");
        let e = load_table(missing, &names(&["x1"]), &names(&["y1"])).unwrap_err();
        assert_eq!((e.code(), e.exit_code()), ("DataFileNotFound", 3));
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let mut x = Mat::from_fn(20, 2, |i, j| ((i * 7 + j * 3) as f64).sin() * 1e3 / 7.0);
        let mut y = Mat::from_fn(20, 3, |i, j| ((i + 11 * j) as f64).cos() / 3.0);
        x[(3, 1)] = f64::NAN;
        y[(5, 0)] = f64::NAN;
        y[(6, 2)] = f64::NAN;
        let ds = ObservedDataset::from_nan_masked(x, y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        save_table(&p1, &ds, b',').unwrap();
        let back = load_table(&p1, ds.x_names(), ds.y_names()).unwrap();
        for i in 0..20 {
            for c in 0..5 {
                let (a, b) = (ds.value(i, c), back.value(i, c));
                assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
            }
        }
        let p2 = dir.path().join("b.tsv");
        save_table(&p2, &back, b'\t').unwrap();
        let again = load_table(&p2, ds.x_names(), ds.y_names()).unwrap();
        let p3 = dir.path().join("c.csv");
        save_table(&p3, &again, b',').unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
    }
}
