//! JSONL trajectory files: one trajectory object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Trajectory};
use crate::error::{PodnetError, Result};

pub fn write_dataset<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    for traj in &dataset.trajectories {
        serde_json::to_writer(&mut writer, traj)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut trajectories = Vec::new();
    for (index, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| PodnetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        traj.validate().map_err(|e| PodnetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        trajectories.push(traj);
    }
    if trajectories.is_empty() {
        return Err(PodnetError::invalid("dataset file contains no trajectories"));
    }
    Dataset::new(trajectories)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, EnvSpec};

    #[test]
    fn round_trip_is_exact() {
        let spec = EnvSpec::waypoint2d(3, 1).unwrap();
        let ds = generate_dataset(&spec, 4, 9).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 4);
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let text = "{\"id\":\"a\",\"env\":\"x\",\"states\":[[0.0],[1.0]],\"actions\":[[1.0]]}\n\
                    {\"id\":\"b\",\"env\":\"x\",\"states\":[[0.0],[1.0]]}\n";
        let err = read_dataset(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, PodnetError::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("actions"), "{msg}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let text = "{\"id\":\"a\",\"env\":\"x\",\"states\":[[0.0],[1.0]],\"actions\":[[1.0],[2.0]]}\n";
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(PodnetError::Parse { line: 1, .. })
        ));
        let ragged = "{\"id\":\"a\",\"env\":\"x\",\"states\":[[0.0],[1.0, 2.0]],\"actions\":[[1.0]]}\n";
        assert!(read_dataset(ragged.as_bytes()).is_err());
    }

    #[test]
    fn labels_are_optional() {
        let text = "{\"id\":\"a\",\"env\":\"x\",\"states\":[[0.0],[1.0]],\"actions\":[[1.0]]}\n";
        let ds = read_dataset(text.as_bytes()).unwrap();
        assert!(ds.trajectories[0].true_labels.is_none());
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert!(!String::from_utf8(buf).unwrap().contains("labels"));
    }
}
