//! Plain-text run report. Floats use Rust's shortest round-trip formatting
//! and nothing time- or host-dependent is recorded, so identical runs yield
//! identical bytes.

use std::fmt::Write as _;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the per-class accuracies over classes that are present.
    pub macro_accuracy: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Self {
            accuracy: correct as f64 / total.max(1) as f64,
            macro_accuracy: present.iter().sum::<f64>() / present.len().max(1) as f64,
            per_class,
            confusion,
        }
    }

    pub fn support(&self, class: usize) -> usize {
        self.confusion[class].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub config: Vec<(String, String)>,
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
    pub metrics: Option<Metrics>,
}

impl TrainReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sccam-report {REPORT_VERSION}");
        s.push_str("\n[config]\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (name, curve) in [("stage1", &self.stage1_loss), ("stage2", &self.stage2_loss)] {
            let _ = writeln!(s, "\n[{name}]\nepochs = {}", curve.len());
            for (e, l) in curve.iter().enumerate() {
                let _ = writeln!(s, "loss.{:04} = {l}", e + 1);
            }
        }
        if let Some(m) = &self.metrics {
            let _ = writeln!(s, "\n[metrics]\naccuracy = {}\nmacro_accuracy = {}", m.accuracy, m.macro_accuracy);
            for (c, acc) in m.per_class.iter().enumerate() {
                let acc = acc.map_or_else(|| "n/a".to_string(), |a| a.to_string());
                let _ = writeln!(s, "class.{c}.accuracy = {acc}\nclass.{c}.support = {}", m.support(c));
            }
            s.push_str("\n[confusion]\n# rows: true class, columns: predicted class\n");
            for (c, row) in m.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{c} = {}", cells.join(" "));
            }
        }
        s
    }
}
