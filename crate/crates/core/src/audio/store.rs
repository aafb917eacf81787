//! On-disk dataset layout: one tensor container per clip plus per-partition
//! label CSVs and a JSON metadata file.
//!
//! ```text
//! dir/
//!   meta.json                 tasks, shape, task names, counts
//!   train/clip000000.vpt      features, one file per clip
//!   train/labels.csv          index,labels ("1;0;...", one flag per task)
//!   devel/...  test/...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::container::{read_tensor, write_tensor};
use crate::audio::synth::{Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub tasks: usize,
    pub frames: usize,
    pub mels: usize,
    pub task_names: Vec<String>,
    pub train: usize,
    pub devel: usize,
    pub test: usize,
}

const PARTS: [&str; 3] = ["train", "devel", "test"];

pub fn save_dataset(dir: &Path, data: &Dataset, task_names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        tasks: data.tasks,
        frames: data.shape.0,
        mels: data.shape.1,
        task_names: task_names.to_vec(),
        train: data.train.len(),
        devel: data.devel.len(),
        test: data.test.len(),
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    for (name, samples) in PARTS.iter().zip([&data.train, &data.devel, &data.test]) {
        let pdir = dir.join(name);
        std::fs::create_dir_all(&pdir)?;
        let mut labels = String::from("index,labels\n");
        for (i, s) in samples.iter().enumerate() {
            write_tensor(&pdir.join(format!("clip{i:06}.vpt")), &s.features)?;
            let flags: Vec<String> = s
                .labels
                .iter()
                .map(|&l| if l > 0.5 { "1".into() } else { "0".into() })
                .collect();
            labels.push_str(&format!("{i},{}\n", flags.join(";")));
        }
        std::fs::write(pdir.join("labels.csv"), labels)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(
        &std::fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join("meta.json").display())))?,
    )
    .map_err(|e| Error::Parse(format!("meta.json: {e}")))?;
    let mut parts: Vec<Vec<Sample>> = Vec::new();
    for (name, count) in PARTS.iter().zip([meta.train, meta.devel, meta.test]) {
        let pdir = dir.join(name);
        let text = std::fs::read_to_string(pdir.join("labels.csv"))
            .map_err(|e| Error::Config(format!("{}: {e}", pdir.join("labels.csv").display())))?;
        let mut samples = Vec::with_capacity(count);
        for (ln, line) in text.lines().skip(1).enumerate() {
            let (idx, flags) = line.split_once(',').ok_or_else(|| {
                Error::Parse(format!("labels.csv line {}: missing comma", ln + 2))
            })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Parse(format!("labels.csv line {}: bad index", ln + 2)))?;
            let labels: Vec<f64> = if flags.is_empty() {
                vec![0.0; meta.tasks]
            } else {
                flags
                    .split(';')
                    .map(|f| match f {
                        "1" => Ok(1.0),
                        "0" => Ok(0.0),
                        other => Err(Error::Parse(format!("labels.csv: bad flag '{other}'"))),
                    })
                    .collect::<Result<Vec<f64>>>()?
            };
            if labels.len() != meta.tasks {
                return Err(Error::Parse(format!(
                    "labels.csv line {}: {} flags for {} tasks",
                    ln + 2,
                    labels.len(),
                    meta.tasks
                )));
            }
            let features = read_tensor(&pdir.join(format!("clip{idx:06}.vpt")))?;
            if features.shape() != [meta.frames, meta.mels] {
                return Err(Error::Shape(format!(
                    "clip {idx} in {name}: shape {:?}, expected ({}, {})",
                    features.shape(),
                    meta.frames,
                    meta.mels
                )));
            }
            samples.push(Sample { features, labels });
        }
        if samples.len() != count {
            return Err(Error::Parse(format!(
                "{name}: found {} clips, meta says {count}",
                samples.len()
            )));
        }
        parts.push(samples);
    }
    let test = parts.pop().unwrap();
    let devel = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((
        Dataset {
            train,
            devel,
            test,
            tasks: meta.tasks,
            shape: (meta.frames, meta.mels),
        },
        meta,
    ))
}
