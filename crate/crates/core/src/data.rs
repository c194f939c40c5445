//! Dialogue records, the JSON-lines file format, and padded batches.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Visual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Audio];

    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Visual => "v",
            Modality::Audio => "a",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One dialogue as stored on disk: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub speakers: Vec<usize>,
    pub labels: Vec<i64>,
    pub text: Vec<Vec<f32>>,
    pub visual: Vec<Vec<f32>>,
    pub audio: Vec<Vec<f32>>,
}

impl DialogueRecord {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn features(&self, m: Modality) -> &[Vec<f32>] {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn features_mut(&mut self, m: Modality) -> &mut Vec<Vec<f32>> {
        match m {
            Modality::Text => &mut self.text,
            Modality::Visual => &mut self.visual,
            Modality::Audio => &mut self.audio,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n || Modality::ALL.iter().any(|&m| self.features(m).len() != n) {
            return Err(Error::Data(format!(
                "dialogue `{}`: speakers, labels and feature lists must have equal length",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<DialogueRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[DialogueRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Feature widths of the three modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub visual: usize,
    pub audio: usize,
}

impl FeatureDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
            Modality::Audio => self.audio,
        }
    }
}

/// `B` dialogues padded to the longest length `L`.
///
/// Padded positions carry zero features, speaker id `n_speakers`, label -1
/// and `mask == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueBatch<T> {
    pub batch: usize,
    pub len: usize,
    pub text: Tensor<T>,
    pub visual: Tensor<T>,
    pub audio: Tensor<T>,
    pub speakers: Vec<usize>,
    pub labels: Vec<i64>,
    pub mask: Vec<bool>,
    pub ids: Vec<String>,
}

impl<T: Scalar> DialogueBatch<T> {
    pub fn collate(records: &[&DialogueRecord], n_speakers: usize, dims: FeatureDims) -> Result<Self> {
        let batch = records.len();
        let len = records.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut speakers = vec![n_speakers; batch * len];
        let mut labels = vec![-1i64; batch * len];
        let mut mask = vec![false; batch * len];
        let mut feats: Vec<Vec<T>> = Modality::ALL
            .iter()
            .map(|&m| vec![T::zero(); batch * len * dims.get(m)])
            .collect();
        for (b, rec) in records.iter().enumerate() {
            rec.validate()?;
            for i in 0..rec.len() {
                let pos = b * len + i;
                if rec.speakers[i] >= n_speakers {
                    return Err(Error::Data(format!(
                        "dialogue `{}`: speaker id {} out of range (n_speakers = {n_speakers})",
                        rec.id, rec.speakers[i]
                    )));
                }
                speakers[pos] = rec.speakers[i];
                labels[pos] = rec.labels[i];
                mask[pos] = true;
                for m in Modality::ALL {
                    let d = dims.get(m);
                    let row = &rec.features(m)[i];
                    if row.len() != d {
                        return Err(Error::Config(format!(
                            "dialogue `{}`: {:?} feature width {} does not match configured {d}",
                            rec.id,
                            m,
                            row.len()
                        )));
                    }
                    let dst = &mut feats[m.index()][pos * d..(pos + 1) * d];
                    for (o, &x) in dst.iter_mut().zip(row) {
                        *o = T::of(x as f64);
                    }
                }
            }
        }
        let mut it = feats.into_iter();
        let mut next = |m: Modality| Tensor::from_vec(&[batch, len, dims.get(m)], it.next().unwrap());
        Ok(DialogueBatch {
            batch,
            len,
            text: next(Modality::Text),
            visual: next(Modality::Visual),
            audio: next(Modality::Audio),
            speakers,
            labels,
            mask,
            ids: records.iter().map(|r| r.id.clone()).collect(),
        })
    }

    pub fn features(&self, m: Modality) -> &Tensor<T> {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    /// Per-position class targets; `None` at padded positions.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .zip(&self.mask)
            .map(|(&y, &m)| if m && y >= 0 { Some(y as usize) } else { None })
            .collect()
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
