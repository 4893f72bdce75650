//! Numeric CSV input: one observation per row, one column per dimension.
//!
//! A first row that does not parse as numbers is taken as a header.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Streaming row reader; yields rows as soon as they are complete, so it
/// also works on a pipe.
pub struct CsvRows<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    first: bool,
    dim: Option<usize>,
}

pub fn rows<R: Read>(reader: R) -> CsvRows<R> {
    let records = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader)
        .into_records();
    CsvRows {
        records,
        first: true,
        dim: None,
    }
}

fn parse_record(record: &csv::StringRecord) -> std::result::Result<Vec<f64>, String> {
    record
        .iter()
        .map(|f| {
            let v: f64 = f.parse().map_err(|_| format!("'{f}' is not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("'{f}' is not finite"))
            }
        })
        .collect()
}

impl<R: Read> Iterator for CsvRows<R> {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let record = match self.records.next()? {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    return Some(Err(Error::Parse {
                        line,
                        message: e.to_string(),
                    }));
                }
            };
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.iter().all(str::is_empty) {
                continue;
            }
            let first = std::mem::replace(&mut self.first, false);
            let values = match parse_record(&record) {
                Ok(v) => v,
                Err(_) if first => continue,
                Err(message) => return Some(Err(Error::Parse { line, message })),
            };
            match self.dim {
                None => self.dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Some(Err(Error::Parse {
                        line,
                        message: format!("expected {d} columns, found {}", values.len()),
                    }))
                }
                Some(_) => {}
            }
            return Some(Ok(values));
        }
    }
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    rows(reader).collect()
}

pub fn read_csv_path(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file =
        File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_csv(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_detection() {
        let with = read_csv("x,y\n1,2\n3.5,-4e-1\n".as_bytes()).unwrap();
        let without = read_csv("1,2\n3.5,-4e-1\n".as_bytes()).unwrap();
        assert_eq!(with, vec![vec![1.0, 2.0], vec![3.5, -0.4]]);
        assert_eq!(with, without);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match read_csv("a,b\n1,2\n3,oops\n".as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("{other:?}"),
        }
        match read_csv("1,2\n3\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(read_csv("1,2\n1,nan\n".as_bytes()).is_err());
        assert!(read_csv("1,2\n1,inf\n".as_bytes()).is_err());
    }

    #[test]
    fn blank_lines_and_spaces() {
        let rows = read_csv(" 1 , 2 \n\n3,4\n".as_bytes()).unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(read_csv("".as_bytes()).unwrap().is_empty());
    }
}
