//! Per-epoch training report, written as CSV.

use std::fmt::Write;

use crate::task::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Mean loss per task over the steps that computed it.
    pub losses: Vec<(Task, Option<f64>)>,
    pub val_miou: Option<f64>,
    pub val_pixacc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub tasks: Vec<Task>,
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    pub fn new(tasks: Vec<Task>) -> Self {
        TrainReport { tasks, rows: Vec::new() }
    }

    pub fn header(&self) -> String {
        let mut h = String::from("epoch,lr");
        for t in &self.tasks {
            write!(h, ",loss_{t}").unwrap();
        }
        h.push_str(",val_miou,val_pixacc,seconds");
        h
    }

    /// Full CSV. Floats use the shortest exact decimal form, so two reports
    /// compare equal as text iff their values are bit-identical.
    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// CSV with the wall-time column left blank, for determinism checks.
    pub fn to_csv_untimed(&self) -> String {
        self.render(false)
    }

    fn render(&self, timed: bool) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.epoch, r.lr).unwrap();
            for (_, l) in &r.losses {
                write!(out, ",{}", cell(*l)).unwrap();
            }
            write!(out, ",{},{},", cell(r.val_miou), cell(r.val_pixacc)).unwrap();
            if timed {
                write!(out, "{:.3}", r.seconds).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    pub fn loss_series(&self, task: Task) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| r.losses.iter().find(|(t, _)| *t == task).and_then(|(_, l)| *l))
            .collect()
    }
}
