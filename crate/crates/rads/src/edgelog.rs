//! On-disk edge logs: a continuous log (sidecar JSONL, images optional) and
//! one directory per detection event with its frames and a manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rads_core::detector::DetectorModel;
use rads_core::edge::{DetectionEvent, FrameRecord, LogEntry};
use rads_core::ScoredBox;
use serde::{Deserialize, Serialize};

use crate::config::OutputConfig;
use crate::world::World;
use crate::{jsonl, pnm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    pub id: String,
    pub camera: String,
    pub timestamp: f64,
    pub image: Option<String>,
    pub detections: Vec<ScoredBox>,
}

/// `event.json` in each event directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventManifest {
    pub event: DetectionEvent,
    pub model_version: u64,
    pub frames: Vec<EventFrame>,
}

pub struct EdgeLogWriter {
    root: PathBuf,
    output: OutputConfig,
    sidecar: BufWriter<File>,
}

impl EdgeLogWriter {
    pub fn create(root: &Path, output: OutputConfig) -> Result<Self> {
        std::fs::create_dir_all(root.join("continuous"))
            .and_then(|()| std::fs::create_dir_all(root.join("events")))
            .with_context(|| format!("creating {}", root.display()))?;
        let sidecar = BufWriter::new(File::create(root.join("continuous").join("log.jsonl"))?);
        Ok(Self { root: root.to_path_buf(), output, sidecar })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn continuous_image(&mut self, frame: &FrameRecord) -> Result<()> {
        if self.output.continuous_images {
            let name = format!("{}.{}", frame.id, pnm::extension(&frame.image));
            pnm::save(&self.root.join("continuous").join(name), &frame.image)?;
        }
        Ok(())
    }

    pub fn continuous_entries(&mut self, entries: &[LogEntry]) -> Result<()> {
        jsonl::write_lines(&mut self.sidecar, entries)?;
        self.sidecar.flush()?;
        Ok(())
    }

    /// Re-captures the event's frames and writes them with fresh detections.
    pub fn event(&mut self, event: &DetectionEvent, world: &World, model: &dyn DetectorModel) -> Result<()> {
        let dir = self.root.join("events").join(format!("event-{:05}", event.id));
        std::fs::create_dir_all(&dir)?;
        let mut frames = Vec::with_capacity(event.frames.len());
        for id in &event.frames {
            let key = world.parse_frame_id(id).ok_or_else(|| anyhow!("event frame {id} not from this world"))?;
            let frame = world.frame(key, &world.schedule(key.day));
            let detections = model.infer(&frame.image)?;
            let image = if self.output.event_images {
                let name = format!("{id}.{}", pnm::extension(&frame.image));
                pnm::save(&dir.join(&name), &frame.image)?;
                Some(name)
            } else {
                None
            };
            let mut sidecar = BufWriter::new(File::create(dir.join(format!("{id}.jsonl")))?);
            jsonl::write_lines(&mut sidecar, &detections)?;
            sidecar.flush()?;
            frames.push(EventFrame { id: id.clone(), camera: frame.camera, timestamp: frame.timestamp, image, detections });
        }
        let manifest = EventManifest { event: event.clone(), model_version: model.version(), frames };
        std::fs::write(dir.join("event.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}
