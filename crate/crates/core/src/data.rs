//! CSV input and output, and the detrending and standardization transforms.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Months in the trailing moving average removed by [`detrend_ma12`].
pub const DETREND_WINDOW: usize = 12;

fn is_iso_date(s: &str) -> bool {
    let parts: Vec<&str> = s.split('-').collect();
    let num = |p: &str, len: usize| p.len() == len && p.bytes().all(|b| b.is_ascii_digit());
    match parts.as_slice() {
        [y, m] => num(y, 4) && num(m, 2) && (1..=12).contains(&m.parse::<u32>().unwrap_or(0)),
        [y, m, d] => {
            num(y, 4)
                && num(m, 2)
                && num(d, 2)
                && (1..=12).contains(&m.parse::<u32>().unwrap_or(0))
                && (1..=31).contains(&d.parse::<u32>().unwrap_or(0))
        }
        _ => false,
    }
}

/// Reads a dataset from a CSV file; see [`read_csv`].
pub fn ingest_csv(path: impl AsRef<Path>, exogenous: &[String]) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, exogenous)
}

/// Parses a CSV with a header row and numeric cells.
///
/// A first column whose header is `date` (any case) or whose first cell is
/// an ISO-8601 date (`YYYY-MM` or `YYYY-MM-DD`) becomes the time index.
/// Columns named in `exogenous` form the exogenous block, all others the
/// endogenous block, both in file order.
pub fn read_csv<R: Read>(input: R, exogenous: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() {
        return Err(Error::Data("CSV has no columns".into()));
    }
    let records = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(Error::Data("CSV has no data rows".into()));
    }
    let has_index = header[0].eq_ignore_ascii_case("date") || is_iso_date(records[0].get(0).unwrap_or("").trim());
    let first = usize::from(has_index);
    let names = &header[first..];
    for e in exogenous {
        if !names.contains(e) {
            return Err(Error::Data(format!("exogenous column \"{e}\" not found in header")));
        }
    }
    let y_cols: Vec<usize> = (0..names.len()).filter(|&j| !exogenous.contains(&names[j])).collect();
    let x_cols: Vec<usize> = (0..names.len()).filter(|&j| exogenous.contains(&names[j])).collect();
    if y_cols.is_empty() {
        return Err(Error::Data("no endogenous columns".into()));
    }

    let t = records.len();
    let mut values = DMatrix::zeros(t, names.len());
    let mut index = Vec::with_capacity(if has_index { t } else { 0 });
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        let line = rec.position().map_or(row + 1, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {row} (line {line}) has {} cells, expected {}", rec.len(), header.len())));
        }
        if has_index {
            let date = rec[0].trim();
            if !is_iso_date(date) {
                return Err(Error::Data(format!("row {row} (line {line}), column \"{}\": \"{date}\" is not an ISO-8601 date", header[0])));
            }
            index.push(date.to_string());
        }
        for (j, name) in names.iter().enumerate() {
            let cell = rec[first + j].trim();
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::Data(format!("row {row} (line {line}), column \"{name}\": \"{cell}\" is not a number"))
            })?;
            values[(i, j)] = v;
        }
    }
    let y = DMatrix::from_fn(t, y_cols.len(), |i, j| values[(i, y_cols[j])]);
    let x = DMatrix::from_fn(t, x_cols.len(), |i, j| values[(i, x_cols[j])]);
    let mut data = Dataset::new(y, x)?.with_labels(
        y_cols.iter().map(|&j| names[j].clone()).collect(),
        x_cols.iter().map(|&j| names[j].clone()).collect(),
    )?;
    if has_index {
        data = data.with_index(index)?;
    }
    Ok(data)
}

/// Writes a dataset with 17 significant digits, endogenous columns first.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = Vec::new();
    if data.index().is_some() {
        header.push("date");
    }
    header.extend(data.y_labels().iter().map(String::as_str));
    header.extend(data.x_labels().iter().map(String::as_str));
    w.write_record(&header)?;
    for t in 0..data.n_obs() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ix) = data.index() {
            row.push(ix[t].clone());
        }
        row.extend(data.y().row(t).iter().map(|v| format!("{v:.16e}")));
        row.extend(data.x().row(t).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `x_t − mean(x_{t−12}, …, x_{t−1})`; the first 12 observations are dropped.
pub fn detrend_ma12(series: &[f64]) -> Result<Vec<f64>> {
    if series.len() <= DETREND_WINDOW {
        return Err(Error::Data(format!(
            "detrending needs more than {DETREND_WINDOW} observations, got {}",
            series.len()
        )));
    }
    Ok(series
        .windows(DETREND_WINDOW + 1)
        .map(|w| w[DETREND_WINDOW] - w[..DETREND_WINDOW].iter().sum::<f64>() / DETREND_WINDOW as f64)
        .collect())
}

/// Rescales to sample mean 0 and sample standard deviation (denominator `n − 1`) 1.
pub fn standardize(series: &[f64]) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Data("standardizing needs at least two observations".into()));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Data("cannot standardize a constant series".into()));
    }
    Ok(series.iter().map(|v| (v - mean) / sd).collect())
}

fn map_columns(m: &DMatrix<f64>, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    m.column_iter().map(|c| f(c.as_slice())).collect()
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Applies the optional detrending and standardization to every column.
pub fn preprocess(data: &Dataset, detrend: bool, standardize_columns: bool) -> Result<Dataset> {
    let step = |s: &[f64]| -> Result<Vec<f64>> {
        let s = if detrend { detrend_ma12(s)? } else { s.to_vec() };
        if standardize_columns {
            standardize(&s)
        } else {
            Ok(s)
        }
    };
    let ys = map_columns(data.y(), step)?;
    let xs = map_columns(data.x(), step)?;
    let dropped = if detrend { DETREND_WINDOW } else { 0 };
    let rows = data.n_obs() - dropped;
    let mut out = Dataset::new(from_columns(&ys, rows), from_columns(&xs, rows))?
        .with_labels(data.y_labels().to_vec(), data.x_labels().to_vec())?;
    if let Some(ix) = data.index() {
        out = out.with_index(ix[dropped..].to_vec())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{random_stable_model, simulate_msvar};
    use crate::model::ModelSpec;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn well_formed_file() {
        let text = "a,b\n1,2\n3,4\n5.5,-6e-1\n";
        let data = read_csv(text.as_bytes(), &[]).unwrap();
        assert_eq!((data.n_obs(), data.dim()), (3, 2));
        assert_eq!(data.y()[(2, 1)], -0.6);
        assert_eq!(data.y_labels(), &["a".to_string(), "b".to_string()]);
        assert!(data.index().is_none());
    }

    #[test]
    fn date_column_and_exogenous_split() {
        let text = "date,r,d/p,infl\n1990-01,0.1,2,3\n1990-02,0.2,4,5\n";
        let data = read_csv(text.as_bytes(), &["infl".to_string()]).unwrap();
        assert_eq!(data.index().unwrap(), &["1990-01".to_string(), "1990-02".to_string()]);
        assert_eq!(data.y_labels(), &["r".to_string(), "d/p".to_string()]);
        assert_eq!(data.x_labels(), &["infl".to_string()]);
        assert_eq!(data.x()[(1, 0)], 5.0);
        assert!(read_csv(text.as_bytes(), &["missing".to_string()]).is_err());
    }

    #[test]
    fn missing_cell_names_row_and_column() {
        let text = "r,d/p\n0.1,0.2\n0.3,NA\n";
        let err = read_csv(text.as_bytes(), &[]).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column \"d/p\""), "{err}");
        let text = "r,d/p\n0.1,0.2\n0.3\n";
        assert!(read_csv(text.as_bytes(), &[]).is_err());
        let text = "date,r\n1990-13,0.1\n";
        assert!(read_csv(text.as_bytes(), &[]).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = ModelSpec::new(2, 1, 3);
        let model = random_stable_model(&spec, 5).unwrap();
        let data = simulate_msvar(&model, 50, 10, 5).unwrap().data;
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &[]).unwrap();
        assert_eq!(back.y(), data.y());
        let dated = data.clone().with_index((0..50).map(|i| format!("{}-{:02}", 2000 + i / 12, 1 + i % 12)).collect()).unwrap();
        let mut buf = Vec::new();
        write_csv(&dated, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice(), &[]).unwrap(), dated);
    }

    #[test]
    fn detrend_examples() {
        assert!(detrend_ma12(&[4.0; 20]).unwrap().iter().all(|v| *v == 0.0));
        let lin: Vec<f64> = (1..=30).map(f64::from).collect();
        let out = detrend_ma12(&lin).unwrap();
        assert_eq!(out.len(), 18);
        assert!(out.iter().all(|v| (v - 6.5).abs() < 1e-12));
        assert!(detrend_ma12(&[1.0; 12]).is_err());
    }

    #[test]
    fn standardize_examples() {
        let out = standardize(&[-1.0, 1.0]).unwrap();
        assert!((out[0] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((out[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(standardize(&[3.0; 5]).is_err());
    }

    #[test]
    fn preprocess_drops_twelve_rows() {
        let y = DMatrix::from_fn(40, 2, |i, j| (i * (j + 1)) as f64 + ((i * 7) % 5) as f64);
        let data = Dataset::endogenous(y).unwrap().with_index((0..40).map(|i| format!("2000-{:02}-01", 1 + i % 12)).collect()).unwrap();
        let out = preprocess(&data, true, true).unwrap();
        assert_eq!(out.n_obs(), 28);
        assert_eq!(out.index().unwrap()[0], data.index().unwrap()[12]);
        let c = out.y().column(1);
        assert!(c.mean().abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn standardized_moments(xs in proptest::collection::vec(-1e3f64..1e3, 3..60)) {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let spread = xs.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            proptest::prop_assume!(spread > 1e-6);
            let z = standardize(&xs).unwrap();
            let n = z.len() as f64;
            let m = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            prop_assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
            let again = standardize(&z).unwrap();
            prop_assert!(again.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
