//! Structured experiment reports: JSON for machines, CSV for tables.

use std::path::Path;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::Result;

/// One table row, mirroring the ablation-table layout: configuration,
/// per-speaker parameter cost, quality and timing.
#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub mode: String,
    pub scale: bool,
    pub norm: bool,
    pub freeze_b: bool,
    pub speakers: usize,
    pub seed: u64,
    /// Per-speaker trainable parameters, rounded.
    pub params_per_speaker: f64,
    /// The same count as an exact rational "num/den".
    pub params_exact: String,
    pub similarity_mean: f64,
    pub similarity_min: f64,
    pub final_loss: f64,
    pub wall_seconds: f64,
}

impl ReportRow {
    pub fn set_params(&mut self, p: Ratio<i64>) {
        self.params_per_speaker = *p.numer() as f64 / *p.denom() as f64;
        self.params_exact = format!("{}/{}", p.numer(), p.denom());
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report<C: Serialize> {
    pub command: String,
    pub config: C,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::error::Error::Config(format!("json: {}", e)))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from(
        "label,mode,scale,norm,freeze_b,speakers,seed,params_per_speaker,params_exact,\
         similarity_mean,similarity_min,final_loss,wall_seconds\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3},{},{:.6},{:.6},{:.6},{:.3}\n",
            csv_field(&r.label),
            r.mode,
            r.scale,
            r.norm,
            r.freeze_b,
            r.speakers,
            r.seed,
            r.params_per_speaker,
            csv_field(&r.params_exact),
            r.similarity_mean,
            r.similarity_min,
            r.final_loss,
            r.wall_seconds
        ));
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        let mut r = ReportRow {
            label: "full, with scale".into(),
            mode: "shared-b".into(),
            scale: true,
            norm: true,
            freeze_b: false,
            speakers: 8,
            seed: 11,
            params_per_speaker: 0.0,
            params_exact: String::new(),
            similarity_mean: 0.91,
            similarity_min: 0.88,
            final_loss: 0.42,
            wall_seconds: 1.5,
        };
        r.set_params(Ratio::new(2209, 2));
        r
    }

    #[test]
    fn json_and_csv_round_trip_on_disk() {
        let dir = std::env::temp_dir().join(format!("var-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let report = Report {
            command: "test".to_string(),
            config: serde_json::json!({"speakers": 8}),
            rows: vec![row()],
            notes: vec!["note".into()],
        };
        let jp = dir.join("r.json");
        let cp = dir.join("r.csv");
        write_json(&jp, &report).unwrap();
        write_csv(&cp, &report.rows).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&jp).unwrap()).unwrap();
        assert_eq!(parsed["rows"][0]["params_exact"], "2209/2");
        let csv = std::fs::read_to_string(&cp).unwrap();
        assert!(csv.starts_with("label,"));
        assert!(csv.contains("\"full, with scale\""));
        assert!(csv.lines().count() == 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rational_rendering() {
        let mut r = row();
        r.set_params(Ratio::from_integer(973));
        assert_eq!(r.params_exact, "973/1");
        assert_eq!(r.params_per_speaker, 973.0);
    }
}
