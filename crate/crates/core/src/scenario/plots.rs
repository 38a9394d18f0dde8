//! Per-panel series files cut from a run log. No rendering.

use std::path::{Path, PathBuf};

use super::log::{LogError, LogTable};

/// Panel name and its columns after `time`.
pub fn panels(wires: usize) -> Vec<(&'static str, Vec<String>)> {
    let per_wire = |prefixes: &[&str]| -> Vec<String> {
        prefixes
            .iter()
            .flat_map(|p| (1..=wires).map(move |i| format!("{p}{i}")))
            .collect()
    };
    let fixed = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        ("wire_rates", per_wire(&["ldot", "ldot_ref"])),
        ("wire_lengths", per_wire(&["l"])),
        ("wheel_speeds", fixed(&["wheel_left", "wheel_right"])),
        ("tensions", per_wire(&["f", "f_ref"])),
        ("currents", per_wire(&["i"])),
        (
            "cog_velocity",
            fixed(&[
                "vx_ref", "vy_ref", "vz_ref", "wx_ref", "wy_ref", "wz_ref", "vx", "vy", "vz", "wx",
                "wy", "wz",
            ]),
        ),
        ("position", fixed(&["x", "y", "z"])),
        (
            "joints",
            fixed(&["roll_l", "pitch_l", "knee_l", "roll_r", "pitch_r", "knee_r"]),
        ),
    ]
}

/// Writes `<stem>_<panel>.csv` into `out_dir` for every panel and returns
/// the paths. Every panel column must be present in the log.
pub fn emit_plots(log_path: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, LogError> {
    let table = LogTable::read(log_path)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| log_path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let stem = log_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "log".into());
    let panels = panels(table.wire_count());
    // Check every column before writing anything.
    let mut plan = Vec::new();
    for (name, cols) in &panels {
        let mut idx = vec![table.index("time")?];
        for c in cols {
            idx.push(table.index(c)?);
        }
        plan.push((*name, idx));
    }
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (name, idx) in plan {
        let path = dir.join(format!("{stem}_{name}.csv"));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)?;
        w.write_record(idx.iter().map(|&k| table.columns[k].as_str()))?;
        for row in &table.rows {
            w.write_record(idx.iter().map(|&k| row[k].as_str()))?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
