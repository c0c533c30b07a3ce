use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::Sample;

use super::ExtractionRecord;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => invalid(format!("csv: {other:?}")),
    }
}

/// `index,cluster,x0,...,x{d-1}`; the cluster column is empty for unguided
/// generations and diverged coordinates are written as `NaN`.
pub fn write_samples_csv<W: Write>(out: W, records: &[ExtractionRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.x0.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["index".to_string(), "cluster".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        crate::error::check_dim(dim, r.x0.len())?;
        let mut row = vec![r.index.to_string(), r.cluster.map(|c| c.to_string()).unwrap_or_default()];
        row.extend(r.x0.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of `(index, cluster, sample)`.
pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<(usize, Option<usize>, Sample)>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| invalid(format!("samples.csv: bad {what}"));
        let index = rec.get(0).ok_or_else(|| bad("index"))?.parse().map_err(|_| bad("index"))?;
        let cluster = match rec.get(1).ok_or_else(|| bad("cluster"))? {
            "" => None,
            c => Some(c.parse().map_err(|_| bad("cluster"))?),
        };
        let x = rec.iter().skip(2).map(|v| v.parse::<f64>().map_err(|_| bad("coordinate"))).collect::<Result<Sample>>()?;
        rows.push((index, cluster, x));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip_bit_exactly() {
        let records = vec![
            ExtractionRecord { index: 0, cluster: Some(3), stream: 0, x0: vec![0.1 + 0.2, -1e-300, 5.0], diverged: false, diverged_step: None },
            ExtractionRecord { index: 1, cluster: None, stream: 1, x0: vec![f64::NAN; 3], diverged: true, diverged_step: Some(4) },
        ];
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("index,cluster,x0,x1,x2\n0,3,0.30000000000000004,-1e-300,5.0\n1,,NaN,NaN,NaN\n"), "{text}");
        let back = read_samples_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].2, records[0].x0);
        assert_eq!(back[1].1, None);
        assert!(back[1].2.iter().all(|v| v.is_nan()));
    }
}
