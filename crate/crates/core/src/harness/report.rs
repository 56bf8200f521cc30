//! CSV outputs. Floats use Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::AblationRow;

/// Two-column `key,value` table.
pub fn key_value_csv(rows: &[(&str, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

pub const ABLATION_HEADER: &str = "width,teacher_test_acc,final_student_test_acc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let width = r
            .initial_arch
            .hidden
            .first()
            .copied()
            .unwrap_or(r.initial_arch.embedding_dim);
        out.push_str(&format!(
            "{width},{},{}\n",
            r.teacher_test_acc, r.final_student_test_acc
        ));
    }
    out
}

pub const ANGLES_HEADER: &str = "index,label,angle_rad,angle_deg";

/// One row per sample: dataset row index, original label, angle.
pub fn angles_csv(indices: &[usize], labels: &[i64], angles: &[f64]) -> String {
    let mut out = format!("{ANGLES_HEADER}\n");
    for ((i, y), a) in indices.iter().zip(labels).zip(angles) {
        out.push_str(&format!("{i},{y},{a},{}\n", a.to_degrees()));
    }
    out
}

/// Write `contents`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpArch;

    #[test]
    fn tables() {
        assert_eq!(key_value_csv(&[("a", "1".into())]), "key,value\na,1\n");
        let row = AblationRow {
            initial_arch: MlpArch::new(2, &[8], 4, 2),
            teacher_test_acc: 0.5,
            final_student_test_acc: 1.0,
        };
        assert_eq!(
            ablation_csv(&[row]),
            format!("{ABLATION_HEADER}\n8,0.5,1\n")
        );
        assert_eq!(
            angles_csv(&[3], &[-1], &[std::f64::consts::PI]),
            format!("{ANGLES_HEADER}\n3,-1,{},180\n", std::f64::consts::PI)
        );
    }
}
