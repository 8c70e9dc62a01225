//! Run-directory orchestration of the recipe. Every stage reads the artifacts
//! of earlier stages, checks that they were produced under the same config
//! hash, and writes its own outputs stamped with that hash.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use avsr_autograd::{Graph, ParamStore};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{
    generate_corpus, generate_split, load_utterances, read_alignments, write_alignments, Utterance, STATES_PER_UNIT,
};
use crate::decoding::{
    beam_search, evaluate, read_hyps, rover, write_hyps, DecodeConfig, DecoderScorer, EvalReport, HypLine, TokenScorer,
};
use crate::gmmhmm::{boundary_agreement, em_train, flat_start, forced_align, HmmModel, MixSchedule};
use crate::plot::{pca_2d, scatter_png};
use crate::training::checkpoint::restore;
use crate::training::{
    apply_map, load_checkpoint, save_checkpoint, train, AvsrModel, CheckpointMeta, Dims, Example, Init,
    LanguageModel, MapAudit, Objective, Stage, StepRecord, TrainConfig,
};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.avna";

/// Fusion systems in decreasing order of initialization.
pub const FUSION_INITS: [Init; 3] = [Init::Both, Init::AudioOnly, Init::Scratch];
pub const AUDIO_SYSTEM: &str = "pretrain_audio";

pub fn init_name(init: Init) -> &'static str {
    match init {
        Init::Scratch => "scratch",
        Init::AudioOnly => "audio",
        Init::Both => "both",
    }
}

pub fn fusion_system(init: Init) -> String {
    format!("fusion_{}", init_name(init))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub boundary_hits: usize,
    pub boundary_total: usize,
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeSummary {
    pub config_hash: String,
    /// Test CER per system, including the combination of all systems.
    pub cer: BTreeMap<String, f64>,
}

pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub hash: String,
    /// Accept artifacts produced under a different config.
    pub force: bool,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self {
            dir: dir.into(),
            cfg,
            hash,
            force: false,
        })
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn check_hash(&self, found: Option<&str>, path: &Path) -> Result<()> {
        if found == Some(self.hash.as_str()) {
            return Ok(());
        }
        let msg = match found {
            Some(h) => format!(
                "{} was produced under config {h}, the current config is {}; rerun the producing stage or pass --force",
                path.display(),
                self.hash
            ),
            None => format!("{} carries no config hash", path.display()),
        };
        if self.force {
            log::warn!("{msg}");
            Ok(())
        } else {
            Err(Error::HashMismatch(msg))
        }
    }

    fn require(&self, path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: hint.into(),
            })
        }
    }

    /// Writes the resolved config; an existing different config is an error
    /// unless forced.
    pub fn record_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let p = self.path(CONFIG_FILE);
        if p.exists() && !self.force {
            let old = ExperimentConfig::load(&p)?;
            if old.hash() != self.hash {
                return Err(Error::HashMismatch(format!(
                    "{} holds a different config ({}); use a fresh run directory or pass --force",
                    p.display(),
                    old.hash()
                )));
            }
        }
        std::fs::write(&p, self.cfg.to_toml()?).map_err(|e| Error::io(&p, e))
    }

    fn write_json(&self, path: &Path, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn dims(&self) -> Dims {
        let d = &self.cfg.data;
        Dims {
            feature_dim: d.feature_dim,
            height: d.video_height,
            width: d.video_width,
            vocab: d.num_units,
            num_senones: d.num_units * STATES_PER_UNIT,
        }
    }

    pub fn make_data(&self) -> Result<(usize, usize)> {
        self.record_config()?;
        let train = generate_corpus(&self.cfg.data)?;
        let test = generate_split(&self.cfg.data, 1, "test", self.cfg.test.utterances)?;
        train.save(&self.mkdir("data/train")?, Some(&self.hash))?;
        test.save(&self.mkdir("data/test")?, Some(&self.hash))?;
        Ok((train.utterances.len(), test.utterances.len()))
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Utterance>> {
        let dir = self.path(format!("data/{split}"));
        let (hash, utts) = load_utterances(&dir)?;
        self.check_hash(hash.as_deref(), &dir)?;
        Ok(utts)
    }

    pub fn train_gmm(&self) -> Result<Vec<f64>> {
        let utts = self.load_split("train")?;
        let g = &self.cfg.gmm;
        let model = flat_start(&utts, self.cfg.data.num_units, STATES_PER_UNIT)?;
        let (model, report) = em_train(model, &utts, g.iterations, &MixSchedule::doubling(g.iterations, g.max_components))?;
        let dir = self.mkdir("gmm")?;
        model.save(&dir.join("model.avna"), Some(&self.hash))?;
        self.write_json(
            &dir.join("report.json"),
            &serde_json::json!({"objective": report.objective, "components": report.components}),
        )?;
        Ok(report.objective)
    }

    pub fn align(&self) -> Result<AlignReport> {
        let utts = self.load_split("train")?;
        let mp = self.path("gmm/model.avna");
        self.require(&mp, "run `train-gmm` first")?;
        let (model, hash) = HmmModel::load(&mp)?;
        self.check_hash(hash.as_deref(), &mp)?;
        let (mut hits, mut total) = (0, 0);
        let mut rows = Vec::with_capacity(utts.len());
        for u in &utts {
            let ali = forced_align(&model, u)?;
            let (h, n) = boundary_agreement(&u.gold_alignment, &ali.labels, 2);
            hits += h;
            total += n;
            rows.push((u.id.clone(), ali.labels));
        }
        let dir = self.mkdir("align")?;
        write_alignments(&dir.join("alignments.txt"), &rows, Some(&self.hash))?;
        let rep = AlignReport {
            boundary_hits: hits,
            boundary_total: total,
            agreement: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
        };
        self.write_json(&dir.join("report.json"), &rep)?;
        Ok(rep)
    }

    fn alignments(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let p = self.path("align/alignments.txt");
        self.require(&p, "run `align` first")?;
        let (hash, rows) = read_alignments(&p)?;
        self.check_hash(hash.as_deref(), &p)?;
        Ok(rows.into_iter().collect())
    }

    fn examples(&self, utts: &[Utterance], labels: Option<&BTreeMap<String, Vec<usize>>>) -> Result<Vec<Example>> {
        utts.iter()
            .map(|u| {
                let l = match labels {
                    Some(m) => m.get(&u.id).cloned().ok_or_else(|| {
                        Error::Config(format!("{}: no alignment; rerun `align`", u.id))
                    })?,
                    None => Vec::new(),
                };
                Example::from_utterance(u, l)
            })
            .collect()
    }

    fn run_training(
        &self,
        name: &str,
        obj: &impl Objective,
        params: &mut ParamStore,
        data: &[Example],
        tc: &TrainConfig,
    ) -> Result<Vec<StepRecord>> {
        let dir = self.mkdir(name)?;
        let mp = dir.join(METRICS_FILE);
        let mut w = BufWriter::new(File::create(&mp).map_err(|e| Error::io(&mp, e))?);
        let seed = self.cfg.stage_seed(&format!("train.{name}"));
        let recs = train(obj, params, data, tc, seed, |r| {
            log::info!("{name} step {} lr {:.3e} loss {:.4}", r.step, r.lr, r.loss);
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&mp, e))
        })?;
        w.flush().map_err(|e| Error::io(&mp, e))?;
        Ok(recs)
    }

    fn save(&self, name: &str, params: &ParamStore, steps: usize, audit: Option<MapAudit>) -> Result<()> {
        let meta = CheckpointMeta {
            stage: name.to_string(),
            step: steps as u64,
            config_hash: self.hash.clone(),
            audit,
        };
        save_checkpoint(&self.path(name).join(CHECKPOINT_FILE), params, &meta)
    }

    fn load_params(&self, name: &str, hint: &str) -> Result<(ParamStore, CheckpointMeta)> {
        let p = self.path(name).join(CHECKPOINT_FILE);
        self.require(&p, hint)?;
        let (ps, meta) = load_checkpoint(&p)?;
        self.check_hash(Some(&meta.config_hash), &p)?;
        Ok((ps, meta))
    }

    fn build(&self, stage: Stage) -> Result<(ParamStore, AvsrModel)> {
        let seed = self.cfg.stage_seed(&format!("init.{}", stage.name()));
        AvsrModel::build(stage, &self.cfg.model, self.dims(), self.cfg.paper_scale, seed)
    }

    pub fn pretrain_audio(&self) -> Result<Vec<StepRecord>> {
        let data = self.examples(&self.load_split("train")?, None)?;
        let (mut ps, m) = self.build(Stage::PretrainAudio)?;
        let recs = self.run_training(AUDIO_SYSTEM, &m, &mut ps, &data, &self.cfg.train.audio)?;
        self.save(AUDIO_SYSTEM, &ps, recs.len(), None)?;
        Ok(recs)
    }

    pub fn pretrain_video(&self) -> Result<Vec<StepRecord>> {
        let labels = self.alignments()?;
        let data = self.examples(&self.load_split("train")?, Some(&labels))?;
        let (mut ps, m) = self.build(Stage::PretrainVideo)?;
        let recs = self.run_training("pretrain_video", &m, &mut ps, &data, &self.cfg.train.video)?;
        self.save("pretrain_video", &ps, recs.len(), None)?;
        Ok(recs)
    }

    pub fn train_fusion(&self, init: Init) -> Result<(MapAudit, Vec<StepRecord>)> {
        let audio = match init {
            Init::Scratch => None,
            _ => Some(self.load_params(AUDIO_SYSTEM, "run `pretrain-audio` first")?.0),
        };
        let video = match init {
            Init::Both => Some(self.load_params("pretrain_video", "run `pretrain-video` first")?.0),
            _ => None,
        };
        let data = self.examples(&self.load_split("train")?, None)?;
        let (mut ps, m) = self.build(Stage::FinetuneFusion)?;
        let audit = apply_map(&mut ps, audio.as_ref(), video.as_ref())?;
        let name = fusion_system(init);
        self.mkdir(&name)?;
        self.write_json(&self.path(&name).join("audit.json"), &audit)?;
        let recs = self.run_training(&name, &m, &mut ps, &data, &self.cfg.train.fusion)?;
        self.save(&name, &ps, recs.len(), Some(audit.clone()))?;
        Ok((audit, recs))
    }

    pub fn train_lm(&self) -> Result<Vec<StepRecord>> {
        let utts = self.load_split("train")?;
        let data: Vec<Example> = utts.iter().map(|u| LanguageModel::example(&u.id, &u.transcript)).collect();
        let (mut ps, lm) = LanguageModel::build(&self.cfg.model, self.cfg.data.num_units, self.cfg.stage_seed("init.lm"))?;
        let recs = self.run_training("lm", &lm, &mut ps, &data, &self.cfg.train.lm)?;
        self.save("lm", &ps, recs.len(), None)?;
        Ok(recs)
    }

    /// Rebuilds a trained system (`pretrain_audio`, `pretrain_video` or
    /// `fusion_<init>`) from its checkpoint.
    pub fn load_system(&self, system: &str) -> Result<(ParamStore, AvsrModel)> {
        let stage = match system {
            AUDIO_SYSTEM => Stage::PretrainAudio,
            "pretrain_video" => Stage::PretrainVideo,
            s if FUSION_INITS.iter().any(|&i| fusion_system(i) == s) => Stage::FinetuneFusion,
            other => {
                return Err(Error::Config(format!(
                    "unknown system `{other}` (expected pretrain_audio, pretrain_video or fusion_{{both,audio,scratch}})"
                )))
            }
        };
        let (mut ps, m) = self.build(stage)?;
        let hint = match stage {
            Stage::FinetuneFusion => format!("run `train-fusion --init {}` first", &system["fusion_".len()..]),
            s => format!("run `{}` first", s.name().replace('_', "-")),
        };
        let (saved, _) = self.load_params(system, &hint)?;
        restore(&mut ps, &saved)?;
        Ok((ps, m))
    }

    pub fn hyp_path(&self, system: &str, split: &str) -> PathBuf {
        self.path(format!("decode/{system}.{split}.hyp"))
    }

    pub fn decode(&self, system: &str, split: &str, dc: &DecodeConfig) -> Result<PathBuf> {
        dc.validate()?;
        let (ps, model) = self.load_system(system)?;
        let decoder = model
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{system}` has no decoder; decode an audio or fusion system")))?;
        let lm = if dc.lm_weight > 0.0 {
            let (saved, _) = self.load_params("lm", "run `train-lm` first, or decode with --lm-weight 0")?;
            let (mut lps, lm) = LanguageModel::build(&self.cfg.model, self.cfg.data.num_units, 0)?;
            restore(&mut lps, &saved)?;
            Some((lps, lm))
        } else {
            None
        };
        let lm_scorer = lm.as_ref().map(|(p, l)| DecoderScorer::new(p, &l.net, Vec::new()));
        let utts = self.load_split(split)?;
        let mut lines = Vec::with_capacity(utts.len());
        for u in &utts {
            let ex = Example::from_utterance(u, Vec::new())?;
            let (ctc, mems) = {
                let mut g = Graph::new(&ps);
                let enc = model.encode(&mut g, &ex)?;
                let logits = model.ctc_logits(&mut g, &enc)?;
                let lp = g.log_softmax(logits);
                let mems: Vec<_> = AvsrModel::memories(&enc)
                    .iter()
                    .map(|m| (g.value(m.value).clone(), m.valid.to_vec()))
                    .collect();
                (g.value(lp).clone(), mems)
            };
            let att = DecoderScorer::new(&ps, decoder, mems);
            let hyps = beam_search(&ctc, &att, lm_scorer.as_ref().map(|s| s as &dyn TokenScorer), dc)?;
            let best = &hyps[0];
            lines.push(HypLine {
                id: u.id.clone(),
                score: best.combined,
                tokens: best.tokens.clone(),
            });
        }
        self.mkdir("decode")?;
        let out = self.hyp_path(system, split);
        write_hyps(&out, &lines, Some(&self.hash))?;
        Ok(out)
    }

    fn read_hyp_file(&self, path: &Path) -> Result<Vec<HypLine>> {
        let (hash, lines) = read_hyps(path)?;
        self.check_hash(hash.as_deref(), path)?;
        Ok(lines)
    }

    /// Scores a hypothesis file against a split; the report lands in
    /// `eval/<file stem>.json`.
    pub fn eval(&self, hyp: &Path, split: &str) -> Result<(EvalReport, PathBuf)> {
        let lines = self.read_hyp_file(hyp)?;
        let refs: Vec<(String, Vec<usize>)> = self
            .load_split(split)?
            .into_iter()
            .map(|u| (u.id, u.transcript))
            .collect();
        let hyps: BTreeMap<String, Vec<usize>> = lines.into_iter().map(|l| (l.id, l.tokens)).collect();
        let report = evaluate(&refs, &hyps)?;
        let stem = hyp.file_stem().and_then(|s| s.to_str()).unwrap_or("hyp");
        let out = self.mkdir("eval")?.join(format!("{stem}.json"));
        self.write_json(&out, &report)?;
        Ok((report, out))
    }

    /// Combines hypothesis files in argument order; utterances missing from
    /// a system count as empty hypotheses for it.
    pub fn rover(&self, inputs: &[PathBuf], out: &Path) -> Result<()> {
        let systems: Vec<Vec<HypLine>> = inputs.iter().map(|p| self.read_hyp_file(p)).collect::<Result<_>>()?;
        let mut ids: Vec<String> = Vec::new();
        for s in &systems {
            for l in s {
                if !ids.contains(&l.id) {
                    ids.push(l.id.clone());
                }
            }
        }
        let maps: Vec<BTreeMap<&str, &[usize]>> = systems
            .iter()
            .map(|s| s.iter().map(|l| (l.id.as_str(), l.tokens.as_slice())).collect())
            .collect();
        let mut lines = Vec::with_capacity(ids.len());
        for id in ids {
            let hyps: Vec<Vec<usize>> = maps.iter().map(|m| m.get(id.as_str()).map_or(Vec::new(), |t| t.to_vec())).collect();
            lines.push(HypLine {
                tokens: rover(&hyps)?,
                id,
                score: 0.0,
            });
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_hyps(out, &lines, Some(&self.hash))
    }

    /// Projects visual frontend outputs of up to `max_utts` utterances to 2-D
    /// and plots one dot per video frame, coloured by its gold senone.
    pub fn inspect_embeddings(&self, system: &str, split: &str, max_utts: usize, out: &Path) -> Result<usize> {
        let (ps, model) = self.load_system(system)?;
        if model.stage == Stage::PretrainAudio {
            return Err(Error::Config(format!("`{system}` has no visual frontend")));
        }
        let utts = self.load_split(split)?;
        let (mut rows, mut labels) = (Vec::new(), Vec::new());
        for u in utts.iter().take(max_utts) {
            let emb = model.visual_embeddings(&ps, u.video.frames())?;
            for j in 0..emb.rows() {
                rows.push(emb.row(j).to_vec());
                let t = (j * crate::corpus::RATE_RATIO + crate::corpus::RATE_RATIO / 2).min(u.gold_alignment.len() - 1);
                labels.push(u.gold_alignment[t]);
            }
        }
        let points = pca_2d(&rows)?;
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        scatter_png(&points, &labels, self.dims().num_senones, 512, out)?;
        Ok(points.len())
    }

    /// Every stage in order: data, alignment, the three pre-trained networks,
    /// the three fusion initializations, decoding and scoring of all systems
    /// on the test split, and their combination.
    pub fn recipe(&self) -> Result<RecipeSummary> {
        self.make_data()?;
        self.train_gmm()?;
        self.align()?;
        self.pretrain_audio()?;
        self.pretrain_video()?;
        self.train_lm()?;
        for init in FUSION_INITS {
            self.train_fusion(init)?;
        }
        let mut cer = BTreeMap::new();
        let mut hyps = Vec::new();
        let mut systems = vec![AUDIO_SYSTEM.to_string()];
        systems.extend(FUSION_INITS.iter().map(|&i| fusion_system(i)));
        for s in &systems {
            let h = self.decode(s, "test", &self.cfg.decode)?;
            let (rep, _) = self.eval(&h, "test")?;
            log::info!("{s}: test CER {:.4}", rep.overall_cer);
            cer.insert(s.clone(), rep.overall_cer);
            hyps.push(h);
        }
        let combined = self.hyp_path("rover", "test");
        self.rover(&hyps, &combined)?;
        cer.insert("rover".into(), self.eval(&combined, "test")?.0.overall_cer);
        let summary = RecipeSummary {
            config_hash: self.hash.clone(),
            cer,
        };
        self.write_json(&self.path("summary.json"), &summary)?;
        Ok(summary)
    }
}
