//! Report types shared between the library and the command-line front end.
//! All CSV emission is deterministic: fixed column order, fixed float
//! precision, rows in input order.

/// One architecture row of the comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub parameters: usize,
    /// Percent reduction against the baseline row; `None` for the baseline.
    pub reduction_pct: Option<f64>,
    pub output_rf: usize,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub baseline: String,
}

impl CompareReport {
    /// Compute reductions against the `aspp` row when present, otherwise
    /// against the first row.
    pub fn new(entries: Vec<(String, usize, usize, Option<f64>)>) -> Self {
        let baseline_idx = entries
            .iter()
            .position(|(name, ..)| name == "aspp")
            .unwrap_or(0);
        let baseline_params = entries.get(baseline_idx).map_or(0, |e| e.1);
        let baseline = entries
            .get(baseline_idx)
            .map_or_else(String::new, |e| e.0.clone());
        let rows = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, parameters, output_rf, miou))| CompareRow {
                reduction_pct: if i == baseline_idx || baseline_params == 0 {
                    None
                } else {
                    Some(100.0 * (1.0 - parameters as f64 / baseline_params as f64))
                },
                name,
                parameters,
                output_rf,
                miou,
            })
            .collect();
        CompareReport { rows, baseline }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("architecture,parameters,reduction_pct,output_rf,miou\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                r.parameters,
                r.reduction_pct.map_or(String::new(), |v| format!("{v:.2}")),
                r.output_rf,
                r.miou.map_or(String::new(), |v| format!("{v:.4}")),
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>14} {:>10} {:>6} {:>8}\n",
            "architecture", "parameters", "reduction", "rf", "miou"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>14} {:>10} {:>6} {:>8}\n",
                r.name,
                r.parameters,
                r.reduction_pct
                    .map_or_else(|| "-".into(), |v| format!("{v:.2}%")),
                r.output_rf,
                r.miou.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
            ));
        }
        out
    }
}

/// One row of the receptive-field report.
#[derive(Debug, Clone, PartialEq)]
pub struct RfRow {
    pub head: String,
    /// `b1`, `b2`, ... or `output`.
    pub stage: String,
    pub rate: Option<usize>,
    pub effective_kernel: Option<usize>,
    pub receptive_field: usize,
}

pub fn rf_csv(rows: &[RfRow]) -> String {
    let mut out = String::from("head,stage,rate,effective_kernel,receptive_field\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.head,
            r.stage,
            r.rate.map_or(String::new(), |v| v.to_string()),
            r.effective_kernel.map_or(String::new(), |v| v.to_string()),
            r.receptive_field,
        ));
    }
    out
}

/// One row of the dilation-sweep report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rates: Vec<usize>,
    pub parameters: usize,
    pub output_rf: usize,
    pub miou: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("rates,parameters,output_rf,miou\n");
    for r in rows {
        let rates: Vec<String> = r.rates.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{{{}}},{},{},{:.4}\n",
            rates.join(" "),
            r.parameters,
            r.output_rf,
            r.miou
        ));
    }
    out
}

/// CRF refinement report. The pairwise energy column follows the
/// unordered-pairs convention (each pair counted once).
#[derive(Debug, Clone, PartialEq)]
pub struct CrfRow {
    pub image: String,
    pub energy_before: f64,
    pub energy_after: f64,
    pub clamped: usize,
    pub miou_before: Option<f64>,
    pub miou_after: Option<f64>,
}

pub fn crf_csv(rows: &[CrfRow]) -> String {
    let mut out = String::from("image,energy_before,energy_after,clamped,miou_before,miou_after\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{}\n",
            r.image,
            r.energy_before,
            r.energy_after,
            r.clamped,
            r.miou_before.map_or(String::new(), |v| format!("{v:.6}")),
            r.miou_after.map_or(String::new(), |v| format!("{v:.6}")),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_use_the_aspp_row_as_baseline() {
        let report = CompareReport::new(vec![
            ("wasp".into(), 80, 121, None),
            ("aspp".into(), 100, 49, None),
        ]);
        assert_eq!(report.baseline, "aspp");
        let red = report.rows[0].reduction_pct.unwrap();
        assert!((red - 20.0).abs() < 1e-9, "reduction {red}");
        assert_eq!(report.rows[1].reduction_pct, None);
    }

    #[test]
    fn single_row_compares_against_itself() {
        let report = CompareReport::new(vec![("cascade".into(), 42, 121, None)]);
        assert_eq!(report.baseline, "cascade");
        assert_eq!(report.rows[0].reduction_pct, None);
        let csv = report.to_csv();
        assert!(csv.contains("cascade,42,,121,"));
    }

    #[test]
    fn csv_output_is_stable() {
        let rows = vec![RfRow {
            head: "wasp".into(),
            stage: "b1".into(),
            rate: Some(6),
            effective_kernel: Some(13),
            receptive_field: 13,
        }];
        assert_eq!(
            rf_csv(&rows),
            "head,stage,rate,effective_kernel,receptive_field\nwasp,b1,6,13,13\n"
        );
    }
}
