use std::fmt;
use std::path::Path;

use crate::error::Result;

/// Header row of the machine-readable table.
pub const TABLE_HEADER: &str = "metric\tvalue\tn_generated\tn_reference\tdistance\tnormalization";

/// One metric value with the populations it was computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    /// `CD`, `EMD` or `-`.
    pub distance: String,
    /// How point coordinates were normalized.
    pub normalization: String,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, n_generated: usize, n_reference: usize, distance: &str) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            n_generated,
            n_reference,
            distance: distance.to_string(),
            normalization: "unit-cube".to_string(),
        }
    }

    pub fn params(&self) -> String {
        format!(
            "n_generated={},n_reference={},distance={},normalization={}",
            self.n_generated, self.n_reference, self.distance, self.normalization
        )
    }

    pub fn table_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.metric, self.value, self.n_generated, self.n_reference, self.distance, self.normalization
        )
    }
}

/// `metric<TAB>value<TAB>params`.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.metric, self.value, self.params())
    }
}

/// Write `<stem>.txt` (line format) and `<stem>.tsv` (table) into `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricReport]) -> Result<()> {
    let mut lines = String::new();
    let mut table = format!("{TABLE_HEADER}\n");
    for r in reports {
        lines.push_str(&format!("{r}\n"));
        table.push_str(&r.table_row());
        table.push('\n');
    }
    std::fs::write(dir.join(format!("{stem}.txt")), lines)?;
    std::fs::write(dir.join(format!("{stem}.tsv")), table)?;
    Ok(())
}
