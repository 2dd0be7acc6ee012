//! CSV sessions and plain numeric tables.
//!
//! Session files have a header naming every column: signal channels
//! `s0..s{n-1}`, continuous context `c0..c{m-1}`, an optional class column `k`
//! and an optional integer `trial` column marking trial boundaries.

use std::path::Path;

use cebra_core::{Matrix, Session};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSession {
    pub session: Session,
    pub trials: Option<Vec<i64>>,
}

#[derive(Clone, Copy)]
enum Column {
    Signal(usize),
    Context(usize),
    Class,
    Trial,
}

fn parse_header(path: &Path, header: &csv::StringRecord) -> Result<(Vec<Column>, usize, usize)> {
    let bad = |msg: String| Error::format(path, msg);
    let mut columns = Vec::with_capacity(header.len());
    for name in header.iter() {
        let name = name.trim();
        let indexed = |prefix: char| -> Option<usize> {
            let rest = name.strip_prefix(prefix)?;
            (!rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                .then(|| rest.parse().ok())
                .flatten()
        };
        let col = match name {
            "k" => Column::Class,
            "trial" => Column::Trial,
            _ => match (indexed('s'), indexed('c')) {
                (Some(i), _) => Column::Signal(i),
                (_, Some(i)) => Column::Context(i),
                _ => return Err(bad(format!("unknown column `{name}` (expected s<i>, c<i>, k or trial)"))),
            },
        };
        columns.push(col);
    }
    let dense = |pick: fn(&Column) -> Option<usize>, label: &str| -> Result<usize> {
        let mut idx: Vec<usize> = columns.iter().filter_map(pick).collect();
        idx.sort_unstable();
        for (want, &got) in idx.iter().enumerate() {
            if got != want {
                return Err(bad(format!("{label} columns must be numbered 0..{} without gaps or repeats", idx.len())));
            }
        }
        Ok(idx.len())
    };
    let n = dense(|c| if let Column::Signal(i) = c { Some(*i) } else { None }, "signal")?;
    let m = dense(|c| if let Column::Context(i) = c { Some(*i) } else { None }, "context")?;
    for (kind, label) in [(0, "k"), (1, "trial")] {
        let count = columns
            .iter()
            .filter(|c| matches!((kind, c), (0, Column::Class) | (1, Column::Trial)))
            .count();
        if count > 1 {
            return Err(bad(format!("column `{label}` appears {count} times")));
        }
    }
    if n == 0 {
        return Err(bad("no signal columns (s0, s1, ...)".into()));
    }
    Ok((columns, n, m))
}

pub fn parse_session(text: &str, path: &Path) -> Result<CsvSession> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::format(path, format!("header: {e}")))?
        .clone();
    let (columns, n, m) = parse_header(path, &header)?;
    let has_k = columns.iter().any(|c| matches!(c, Column::Class));
    let has_trial = columns.iter().any(|c| matches!(c, Column::Trial));
    let mut signal = Vec::new();
    let mut context = Vec::new();
    let mut classes = Vec::new();
    let mut trials = Vec::new();
    let mut row_s = vec![0.0; n];
    let mut row_c = vec![0.0; m];
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, expected_len, .. } => Error::format(
                path,
                format!("row {row}: {len} fields, header has {expected_len}"),
            ),
            _ => Error::format(path, format!("row {row}: {e}")),
        })?;
        for (cell, col) in record.iter().zip(&columns) {
            let at = |what: &str| Error::format(path, format!("row {row}: {what} `{cell}`"));
            match *col {
                Column::Signal(j) | Column::Context(j) => {
                    let v: f64 = cell.parse().map_err(|_| at("non-numeric cell"))?;
                    if !v.is_finite() {
                        return Err(at("non-finite value"));
                    }
                    match col {
                        Column::Signal(_) => row_s[j] = v,
                        _ => row_c[j] = v,
                    }
                }
                Column::Class => classes.push(cell.parse::<u32>().map_err(|_| at("class label is not a nonnegative integer"))?),
                Column::Trial => trials.push(cell.parse::<i64>().map_err(|_| at("trial id is not an integer"))?),
            }
        }
        signal.extend_from_slice(&row_s);
        context.extend_from_slice(&row_c);
    }
    let t = signal.len() / n;
    if t == 0 {
        return Err(Error::format(path, "no data rows"));
    }
    let signal = Matrix::from_vec(t, n, signal)?;
    let continuous = (m > 0).then(|| Matrix::from_vec(t, m, context)).transpose()?;
    let session = Session::new(signal, continuous, has_k.then_some(classes)).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(CsvSession {
        session,
        trials: has_trial.then_some(trials),
    })
}

pub fn read_session(path: &Path) -> Result<CsvSession> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_session(&text, path)
}

/// Session as CSV with the column naming accepted by [`parse_session`].
/// Numbers use the shortest representation that parses back exactly.
pub fn format_session(session: &Session, trials: Option<&[i64]>) -> String {
    let mut header: Vec<String> = (0..session.signal_dim()).map(|i| format!("s{i}")).collect();
    header.extend((0..session.context_dim()).map(|i| format!("c{i}")));
    if session.discrete().is_some() {
        header.push("k".into());
    }
    if trials.is_some() {
        header.push("trial".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for t in 0..session.len() {
        let mut cells: Vec<String> = session.signal().row(t).iter().map(|v| v.to_string()).collect();
        if let Some(c) = session.continuous() {
            cells.extend(c.row(t).iter().map(|v| v.to_string()));
        }
        if let Some(k) = session.discrete() {
            cells.push(k[t].to_string());
        }
        if let Some(tr) = trials {
            cells.push(tr[t].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Matrix as CSV with header `{prefix}0..`.
pub fn format_matrix(m: &Matrix, prefix: &str) -> String {
    let header: Vec<String> = (0..m.cols()).map(|i| format!("{prefix}{i}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Any all-numeric CSV with a header row, as a matrix.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let cols = reader.headers().map_err(|e| Error::format(path, format!("header: {e}")))?.len();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        for cell in record.iter() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: non-numeric cell `{cell}`", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("row {}: non-finite value `{cell}`", i + 1)));
            }
            data.push(v);
        }
    }
    if cols == 0 || data.is_empty() {
        return Err(Error::format(path, "empty table"));
    }
    Ok(Matrix::from_vec(data.len() / cols, cols, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.csv")
    }

    #[test]
    fn three_rows_two_channels() {
        let s = parse_session("s0,s1\n1,2\n3,4\n5,6\n", p()).unwrap();
        assert_eq!(s.session.len(), 3);
        assert_eq!(s.session.signal_dim(), 2);
        assert!(s.session.continuous().is_none() && s.trials.is_none());
    }

    #[test]
    fn columns_map_by_name_in_any_order() {
        let s = parse_session("k,c0,s1,trial,s0\n1,0.5,2,7,1\n0,0.25,4,7,3\n", p()).unwrap();
        assert_eq!(s.session.signal().row(0), &[1.0, 2.0]);
        assert_eq!(s.session.continuous().unwrap().as_slice(), &[0.5, 0.25]);
        assert_eq!(s.session.discrete().unwrap(), &[1, 0]);
        assert_eq!(s.trials.unwrap(), vec![7, 7]);
    }

    #[test]
    fn errors_name_the_row() {
        let nan = parse_session("s0,s1\n1,2\nNaN,4\n", p()).unwrap_err().to_string();
        assert!(nan.contains("row 2"), "{nan}");
        let word = parse_session("s0\n1\nabc\n", p()).unwrap_err().to_string();
        assert!(word.contains("row 2") && word.contains("non-numeric"), "{word}");
        let ragged = parse_session("s0,s1\n1,2\n3\n", p()).unwrap_err().to_string();
        assert!(ragged.contains("row 2"), "{ragged}");
    }

    #[test]
    fn header_problems_are_rejected() {
        assert!(parse_session("s0,s2\n1,2\n", p()).is_err());
        assert!(parse_session("s0,x\n1,2\n", p()).is_err());
        assert!(parse_session("c0\n1\n", p()).is_err());
        assert!(parse_session("s0,k,k\n1,0,0\n", p()).is_err());
        assert!(parse_session("s0\n", p()).is_err());
    }

    #[test]
    fn formatted_sessions_parse_back_exactly() {
        let text = "s0,s1,c0,k,trial\n0.1,-2e-300,3.5,1,0\n1e300,0,-0.3333333333333333,0,1\n";
        let s = parse_session(text, p()).unwrap();
        let again = parse_session(&format_session(&s.session, s.trials.as_deref()), p()).unwrap();
        assert_eq!(again, s);
    }
}
