use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use super::HeatmapMatrix;
use crate::error::{Error, Result};
use crate::probes::ProbeConfig;
use crate::reprstore::TokenKind;
use crate::trainer::{TrainHistory, TrainPlan};

/// A float with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON whose floats carry 17 significant digits. Non-finite floats
/// become `null`.
struct Full(PrettyFormatter<'static>);

impl Formatter for Full {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            w.write_all(fmt17(value).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Full(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_string(value)?).map_err(|e| Error::io(path, e))
}

/// Who produced an output and from what.
#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Parsed command arguments.
    #[serde(default)]
    pub args: serde_json::Value,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, args: serde_json::Value) -> Self {
        Provenance {
            tool: "layerfuse".into(),
            version: crate::VERSION.into(),
            command: command.into(),
            seed,
            args,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_train_bal_acc: f64,
    pub final_val_bal_acc: Option<f64>,
}

impl HistorySummary {
    pub fn from_history(h: &TrainHistory) -> Self {
        HistorySummary {
            epochs: h.train_loss.len(),
            steps: h.steps,
            final_train_loss: h.train_loss.last().copied().unwrap_or(f64::NAN),
            final_train_bal_acc: h.train_bal_acc.last().copied().unwrap_or(f64::NAN),
            final_val_bal_acc: h.val_bal_acc.last().copied().flatten(),
        }
    }
}

/// Contents of `report.json`. Holds no wall-clock values, so reruns with
/// identical inputs produce identical bytes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub config: ProbeConfig,
    pub label: String,
    pub plan: Option<TrainPlan>,
    pub seed: u64,
    pub num_layers: usize,
    pub layers: Vec<usize>,
    pub num_rows: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_fallback: bool,
    pub score_entries: usize,
    pub param_count: usize,
    pub test_bal_acc: Option<f64>,
    pub baseline_bal_acc: Option<f64>,
    pub gain_pp: Option<f64>,
    pub history: Option<HistorySummary>,
}

/// Everything `emit_report` can write.
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub report: Option<RunReport>,
    pub history: Option<TrainHistory>,
    pub heatmap: Option<HeatmapMatrix>,
    pub cka: Vec<(TokenKind, Vec<f64>)>,
}

fn cka_csv(curves: &[(TokenKind, Vec<f64>)]) -> String {
    let mut out = String::from("layer");
    for (k, _) in curves {
        out.push(',');
        out.push_str(k.as_str());
    }
    out.push('\n');
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for l in 0..n {
        out.push_str(&(l + 1).to_string());
        for (_, c) in curves {
            out.push(',');
            if let Some(v) = c.get(l) {
                out.push_str(&fmt17(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `report.json`, `history.csv`, `heatmap.csv` and `cka.csv` (each
/// only when present) into `dir`, creating it if needed.
pub fn emit_report(dir: impl AsRef<Path>, files: &ReportFiles) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if let Some(r) = &files.report {
        put("report.json", to_json_string(r)?)?;
    }
    if let Some(h) = &files.history {
        put("history.csv", h.to_csv())?;
    }
    if let Some(h) = &files.heatmap {
        put("heatmap.csv", h.to_csv())?;
    }
    if !files.cka.is_empty() {
        put("cka.csv", cka_csv(&files.cka))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let xs = vec![0.1, 1.0 / 3.0, 2.0f64.sqrt(), 1e-300, -7.25e12, f64::MIN_POSITIVE];
        let text = to_json_string(&xs).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, xs);
        let text = to_json_string(&vec![f64::NAN]).unwrap();
        let back: Vec<Option<f64>> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, vec![None]);
    }

    #[test]
    fn cka_csv_layout() {
        let csv = cka_csv(&[(TokenKind::Cls, vec![0.5, 1.0]), (TokenKind::Ap, vec![0.25, 1.0])]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,CLS,AP");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,1.0000000000000000e0,"));
    }

    #[test]
    fn unwritable_directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("f");
        fs::write(&file, "x").unwrap();
        let files = ReportFiles {
            cka: vec![(TokenKind::Cls, vec![1.0])],
            ..Default::default()
        };
        assert!(emit_report(file.join("sub"), &files).is_err());
    }
}
