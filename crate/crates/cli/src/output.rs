use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use reform_decomp::effects::EffectSeries;
use reform_decomp::Result;
use serde::Serialize;

/// Version of every JSON document this binary writes.
pub const SCHEMA_VERSION: u32 = 1;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn opt(v: Option<&Vec<f64>>, m: usize) -> String {
    v.map(|x| x[m].to_string()).unwrap_or_default()
}

/// Tidy `estimand,month,point,ci_low,ci_high,p` rows.
pub fn write_series_csv(path: &Path, series: &[EffectSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["estimand", "month", "point", "ci_low", "ci_high", "p"])?;
    for s in series {
        for m in 0..s.horizon() {
            w.write_record([
                s.estimand.as_str().to_string(),
                m.to_string(),
                s.point[m].to_string(),
                opt(s.ci_low.as_ref(), m),
                opt(s.ci_high.as_ref(), m),
                opt(s.p_values.as_ref(), m),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes any sequence of flat serialisable rows with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
