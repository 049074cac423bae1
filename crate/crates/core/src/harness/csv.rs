//! Run records as comma-separated rows. Floats use Rust's shortest
//! round-trip formatting, independent of locale.

use super::ablation::AblationReport;
use super::train::RunRecord;

pub const CSV_HEADER: &str =
    "method,n,r,lr,constraint,optimizer,steps,final_fit_error,final_defect,param_count,seconds,status";

fn record_fields(r: &RunRecord, timing: bool) -> String {
    let seconds = if timing {
        format!("{:?}", r.seconds)
    } else {
        String::new()
    };
    format!(
        "{},{},{},{:?},{},{},{},{:?},{:?},{},{},{}",
        r.method,
        r.n,
        r.r,
        r.lr,
        r.constraint,
        r.optimizer,
        r.steps,
        r.final_fit_error,
        r.final_defect,
        r.param_count,
        seconds,
        r.status.label()
    )
}

/// CSV for plain runs. Wall-clock time is left blank unless `timing` is set,
/// so repeated runs produce identical bytes.
pub fn format_records(records: &[RunRecord], timing: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&record_fields(r, timing));
        out.push('\n');
    }
    out
}

pub fn format_ablation(report: &AblationReport, timing: bool) -> String {
    let mut out = format!("ablation,task,seed,variant,{CSV_HEADER}\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.name,
            row.task,
            row.seed,
            row.variant,
            record_fields(&row.record, timing)
        ));
    }
    out
}
