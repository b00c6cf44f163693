//! JSON-lines label files.
//!
//! One object per line: `{"image", "class", "box", "source", "visible"}`.
//! `box` is the true box for `ground_truth`/`human` sources and the pre-label
//! otherwise. An instance carrying both boxes stores the other one under
//! `prelabel` (reference sources) or `truth` (pre-label sources).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, LabelSource, LabeledInstance};
use crate::geometry::BBox;

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    image: String,
    class: String,
    #[serde(rename = "box")]
    bbox: BBox,
    source: LabelSource,
    #[serde(default = "default_visible")]
    visible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prelabel: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<BBox>,
}

fn default_visible() -> bool {
    true
}

impl LabelLine {
    fn into_instance(self) -> Result<LabeledInstance, String> {
        let (true_box, prelabel_box) = if self.source.is_reference() {
            if self.truth.is_some() {
                return Err("\"truth\" is only valid for pre-label sources".into());
            }
            (Some(self.bbox), self.prelabel)
        } else {
            if self.prelabel.is_some() {
                return Err("\"prelabel\" is only valid for ground_truth/human sources".into());
            }
            (self.truth, Some(self.bbox))
        };
        Ok(LabeledInstance {
            image_id: self.image,
            true_box,
            prelabel_box,
            class_tag: self.class,
            source: self.source,
            visible: self.visible,
        })
    }

    fn from_instance(inst: &LabeledInstance) -> Result<Self, DatasetError> {
        let missing = || DatasetError::InvalidConfig(format!(
            "instance on {} has no box for source {}",
            inst.image_id,
            inst.source.as_str()
        ));
        let (bbox, prelabel, truth) = if inst.source.is_reference() {
            (inst.true_box.ok_or_else(missing)?, inst.prelabel_box, None)
        } else {
            (inst.prelabel_box.ok_or_else(missing)?, None, inst.true_box)
        };
        Ok(Self {
            image: inst.image_id.clone(),
            class: inst.class_tag.clone(),
            bbox,
            source: inst.source,
            visible: inst.visible,
            prelabel,
            truth,
        })
    }
}

pub fn parse_labels(reader: impl BufRead) -> Result<Vec<LabeledInstance>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabelLine = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let inst = parsed.into_instance().map_err(|message| DatasetError::Parse {
            line: line_no,
            message,
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<Vec<LabeledInstance>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    parse_labels(BufReader::new(file))
}

pub fn write_labels(mut writer: impl Write, labels: &[LabeledInstance]) -> Result<(), DatasetError> {
    for inst in labels {
        let line = serde_json::to_string(&LabelLine::from_instance(inst)?)
            .expect("label lines always serialize");
        writeln!(writer, "{line}").map_err(|e| DatasetError::io(Path::new("<writer>"), e))?;
    }
    Ok(())
}

pub fn save_labels(path: &Path, labels: &[LabeledInstance]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_labels(&mut w, labels)?;
    w.flush().map_err(|e| DatasetError::io(path, e))
}
