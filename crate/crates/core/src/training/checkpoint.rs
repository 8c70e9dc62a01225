//! Parameter checkpoints and the pre-trained-to-fusion initialization map.

use std::path::Path;

use avsr_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedArray};
use crate::{Error, Result};

/// Which pre-trained networks initialize the fusion model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    AudioOnly,
    Both,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapAudit {
    /// `(fusion parameter, source checkpoint)`.
    pub mapped: Vec<(String, String)>,
    pub fresh: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    pub audit: Option<MapAudit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Audio,
    Video,
}

/// Pre-trained source of a fusion parameter, by name. Parameters with no
/// source (cross-attention, visual memory, CTC head, decoder) start fresh.
pub fn source_of(name: &str) -> Option<Source> {
    if name.starts_with("audio.") {
        Some(Source::Audio)
    } else if ["visual.stem.", "visual.res.", "visual.proj.", "visual.enc."]
        .iter()
        .any(|p| name.starts_with(p))
    {
        Some(Source::Video)
    } else {
        None
    }
}

/// Copies mapped parameters into `fusion`. A mapped name that the supplied
/// source lacks, or holds with a different shape, is a mapping gap.
pub fn apply_map(fusion: &mut ParamStore, audio: Option<&ParamStore>, video: Option<&ParamStore>) -> Result<MapAudit> {
    let mut audit = MapAudit::default();
    let mut gaps = Vec::new();
    let names: Vec<String> = fusion.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = match source_of(&name) {
            Some(Source::Audio) => audio.map(|s| (s, "audio")),
            Some(Source::Video) => video.map(|s| (s, "video")),
            None => None,
        };
        let Some((store, label)) = src else {
            audit.fresh.push(name);
            continue;
        };
        match store.by_name(&name) {
            Some(t) if Some(t.shape()) == fusion.by_name(&name).map(|x| x.shape()) => {
                fusion.set(&name, t.clone())?;
                audit.mapped.push((name, label.to_string()));
            }
            _ => gaps.push(name),
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MappingGap(gaps));
    }
    Ok(audit)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let mut c = Container::new()
        .with_meta("kind", "checkpoint")
        .with_meta("config_hash", meta.config_hash.clone())
        .with_meta("meta", serde_json::to_string(meta)?);
    for (name, t) in params.iter() {
        c.push(NamedArray::f64_from(name, t));
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run the stage that produces this checkpoint first".into(),
        });
    }
    let c = Container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_str(
        c.meta
            .get("meta")
            .ok_or_else(|| Error::format(path, "checkpoint metadata missing"))?,
    )?;
    let mut ps = ParamStore::new();
    for a in &c.arrays {
        ps.insert(a.name.clone(), a.to_tensor()?)?;
    }
    Ok((ps, meta))
}

/// Overwrites every parameter of `into` with the same-named tensor of
/// `from`; both stores must hold exactly the same names and shapes.
pub fn restore(into: &mut ParamStore, from: &ParamStore) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model has {}",
            from.len(),
            into.len()
        )));
    }
    for (name, t) in from.iter() {
        into.set(name, t.clone())?;
    }
    Ok(())
}
