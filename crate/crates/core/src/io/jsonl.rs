//! Line-delimited JSON logs: one record per line, flushed per write so a
//! crashed run still leaves a readable prefix.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

pub struct JsonlWriter {
    w: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { w: BufWriter::new(File::create(path)?) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = File::options().create(true).append(true).open(path)?;
        Ok(Self { w: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, record)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Rec {
        step: u64,
        loss: f64,
    }

    #[test]
    fn roundtrip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let mut w = JsonlWriter::create(&path).unwrap();
            w.write(&Rec { step: 0, loss: 1.5 }).unwrap();
            w.write(&Rec { step: 1, loss: 1.2 }).unwrap();
        }
        {
            let mut w = JsonlWriter::append(&path).unwrap();
            w.write(&Rec { step: 2, loss: 0.9 }).unwrap();
        }
        let recs: Vec<Rec> = read_jsonl(&path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2], Rec { step: 2, loss: 0.9 });
    }
}
