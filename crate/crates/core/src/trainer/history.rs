//! Per-step metric history and its CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Phase;
use crate::error::{IdaError, Result};
use crate::losses::LossReport;
use crate::metrics::EvalReport;

/// Mean evaluation metrics at one step. Pre-training fills only `dice`
/// (source validation).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub dice: Option<f64>,
    pub cl_dice: Option<f64>,
    pub bm: Option<f64>,
}

impl EvalSummary {
    pub fn dice_only(dice: f64) -> Self {
        EvalSummary {
            dice: Some(dice),
            ..Default::default()
        }
    }

    pub fn from_report(r: &EvalReport) -> Self {
        EvalSummary {
            auc: r.mean("auc"),
            acc: r.mean("acc"),
            se: r.mean("se"),
            sp: r.mean("sp"),
            dice: r.mean("dice"),
            cl_dice: r.mean("cl_dice"),
            bm: r.mean("bm"),
        }
    }

    fn values(&self) -> [Option<f64>; 7] {
        [self.auc, self.acc, self.se, self.sp, self.dice, self.cl_dice, self.bm]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: Phase,
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossReport,
    pub w_t2s: f64,
    pub w_s2t: f64,
    pub pseudo_fg: f64,
    pub eval: Option<EvalSummary>,
}

pub const HISTORY_HEADER: &str = "phase,iteration,lr,total,cls,dice,idcl_t2s,idcl_s2t,con,w_t2s,w_s2t,pseudo_fg,\
eval_auc,eval_acc,eval_se,eval_sp,eval_dice,eval_cl_dice,eval_bm";

impl HistoryRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.phase.as_str(),
            self.iteration,
            self.lr,
            l.total,
            l.cls,
            l.dice,
            l.idcl_t2s,
            l.idcl_s2t,
            l.con,
            self.w_t2s,
            self.w_s2t,
            self.pseudo_fg
        );
        let vals = self.eval.map(|e| e.values()).unwrap_or([None; 7]);
        for v in vals {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&v.to_string());
            }
        }
        s
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_csv(rows)).map_err(|e| IdaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_columns_line_up() {
        let row = HistoryRow {
            phase: Phase::Adapt,
            iteration: 3,
            lr: 0.5,
            loss: LossReport {
                cls: 1.0,
                dice: 2.0,
                idcl_t2s: 3.0,
                idcl_s2t: 4.0,
                con: 5.0,
                total: 15.0,
            },
            w_t2s: 0.25,
            w_s2t: 0.75,
            pseudo_fg: 0.1,
            eval: Some(EvalSummary::dice_only(0.8)),
        };
        let text = history_csv(&[row]);
        let mut lines = text.lines();
        let header: Vec<_> = lines.next().unwrap().split(',').collect();
        let cells: Vec<_> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), cells.len());
        assert_eq!(cells[0], "adapt");
        assert_eq!(cells[3], "15");
        assert_eq!(cells[header.iter().position(|h| *h == "eval_dice").unwrap()], "0.8");
        assert_eq!(cells[header.iter().position(|h| *h == "eval_auc").unwrap()], "");
    }
}
