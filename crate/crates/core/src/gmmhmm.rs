//! Monophone GMM-HMM training and Viterbi forced alignment.
//!
//! Every unit is a strictly left-to-right HMM without skips. Each state emits
//! through a diagonal-covariance GMM and carries a self-loop probability; the
//! remaining mass moves to the next state (or exits the unit from the last
//! state). A path that stays `d` frames in a state therefore scores
//! `(d - 1) log p + log (1 - p)` for that visit.
//!
//! Training is Viterbi EM: align every utterance with the current model, then
//! re-estimate transitions from path counts and run one GMM EM step on the
//! frames assigned to each state. At a fixed mixture count the summed best-path
//! log-likelihood never decreases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedArray};
use crate::corpus::Utterance;
use crate::{Error, Result};
use avsr_autograd::{log_sum_exp, Tensor};

pub const VARIANCE_FLOOR: f64 = 1e-3;
pub const MIN_TRANSITION: f64 = 1e-4;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl Gmm {
    fn single(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            vars: vec![var],
        }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    fn component_log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.len())
            .map(|k| self.weights[k].ln() + diag_gauss(x, &self.means[k], &self.vars[k]))
            .collect()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_likelihoods(x))
    }

    /// Splits the heaviest component into two halves whose means move by
    /// `+-0.1` standard deviations.
    fn split_largest(&mut self) {
        let k = (0..self.weights.len())
            .max_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]).then(b.cmp(&a)))
            .expect("gmm has components");
        let w = self.weights[k] / 2.0;
        let (mean, var) = (self.means[k].clone(), self.vars[k].clone());
        let shift: Vec<f64> = var.iter().map(|v| 0.1 * v.sqrt()).collect();
        self.weights[k] = w;
        self.means[k] = mean.iter().zip(&shift).map(|(m, s)| m + s).collect();
        self.weights.push(w);
        self.means.push(mean.iter().zip(&shift).map(|(m, s)| m - s).collect());
        self.vars.push(var);
    }

    /// One EM step on `frames`. Components that receive no occupancy are
    /// dropped and the remaining weights renormalized.
    fn em_step(&mut self, frames: &[&[f64]], senone: usize) {
        if frames.is_empty() {
            return;
        }
        let k = self.weights.len();
        let d = self.means[0].len();
        let mut occ = vec![0.0; k];
        let mut s1 = vec![vec![0.0; d]; k];
        let mut s2 = vec![vec![0.0; d]; k];
        for x in frames {
            let ll = self.component_log_likelihoods(x);
            let z = log_sum_exp(&ll);
            for c in 0..k {
                let r = (ll[c] - z).exp();
                if r == 0.0 {
                    continue;
                }
                occ[c] += r;
                for j in 0..d {
                    s1[c][j] += r * x[j];
                    s2[c][j] += r * x[j] * x[j];
                }
            }
        }
        let total: f64 = occ.iter().sum();
        let mut next = Gmm {
            weights: Vec::new(),
            means: Vec::new(),
            vars: Vec::new(),
        };
        for c in 0..k {
            if occ[c] <= 0.0 {
                log::warn!("senone {senone}: component {c} has no occupancy, dropping it");
                continue;
            }
            let mean: Vec<f64> = s1[c].iter().map(|s| s / occ[c]).collect();
            let var = s2[c]
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / occ[c] - m * m).max(VARIANCE_FLOOR))
                .collect();
            next.weights.push(occ[c] / total);
            next.means.push(mean);
            next.vars.push(var);
        }
        *self = next;
    }
}

fn diag_gauss(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..x.len() {
        let d = x[j] - mean[j];
        s += d * d / var[j] + var[j].ln() + LN_2PI;
    }
    -0.5 * s
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmmModel {
    pub num_units: usize,
    pub states_per_unit: usize,
    pub dim: usize,
    /// Self-loop probability per senone; the forward probability is `1 - p`.
    pub self_loop: Vec<f64>,
    pub emissions: Vec<Gmm>,
}

/// Dense `(unit, state) -> id` numbering, row-major by unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenoneInventory {
    pub num_units: usize,
    pub states_per_unit: usize,
}

impl SenoneInventory {
    pub fn size(&self) -> usize {
        self.num_units * self.states_per_unit
    }

    pub fn id(&self, unit: usize, state: usize) -> usize {
        unit * self.states_per_unit + state
    }

    pub fn pair(&self, id: usize) -> (usize, usize) {
        (id / self.states_per_unit, id % self.states_per_unit)
    }
}

pub fn build_inventory(model: &HmmModel) -> SenoneInventory {
    SenoneInventory {
        num_units: model.num_units,
        states_per_unit: model.states_per_unit,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentLabels {
    pub utt_id: String,
    pub labels: Vec<usize>,
    pub num_senones: usize,
}

/// Target component count per EM iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule(pub Vec<usize>);

impl MixSchedule {
    /// `1 -> 2 -> 4 ...` in equal thirds of the run, capped at `max`.
    pub fn doubling(iters: usize, max: usize) -> Self {
        Self(
            (0..iters)
                .map(|i| (1usize << (3 * i / iters.max(1))).min(max.max(1)))
                .collect(),
        )
    }

    pub fn fixed(iters: usize, k: usize) -> Self {
        Self(vec![k; iters])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmReport {
    /// Summed best-path log-likelihood, measured before each re-estimation.
    pub objective: Vec<f64>,
    /// Component count of the model that produced each objective value.
    pub components: Vec<usize>,
}

impl HmmModel {
    pub fn num_senones(&self) -> usize {
        self.num_units * self.states_per_unit
    }

    fn unit_states(&self, transcript: &[usize]) -> Result<Vec<usize>> {
        let mut states = Vec::with_capacity(transcript.len() * self.states_per_unit);
        for &u in transcript {
            if u >= self.num_units {
                return Err(Error::Config(format!(
                    "unit {u} outside inventory of {}",
                    self.num_units
                )));
            }
            states.extend((0..self.states_per_unit).map(|s| u * self.states_per_unit + s));
        }
        Ok(states)
    }

    pub fn save(&self, path: &Path, hash: Option<&str>) -> Result<()> {
        let mut c = Container::new()
            .with_meta("kind", "gmmhmm")
            .with_meta("num_units", self.num_units.to_string())
            .with_meta("states_per_unit", self.states_per_unit.to_string())
            .with_meta("dim", self.dim.to_string());
        if let Some(h) = hash {
            c = c.with_meta("config_hash", h);
        }
        c.push(NamedArray::f64_from(
            "self_loop",
            &Tensor::new(&[self.self_loop.len()], self.self_loop.clone())?,
        ));
        for (s, g) in self.emissions.iter().enumerate() {
            let k = g.num_components();
            c.push(NamedArray::f64_from(format!("gmm.{s}.weights"), &Tensor::new(&[k], g.weights.clone())?));
            let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<_>>();
            c.push(NamedArray::f64_from(format!("gmm.{s}.means"), &Tensor::new(&[k, self.dim], flat(&g.means))?));
            c.push(NamedArray::f64_from(format!("gmm.{s}.vars"), &Tensor::new(&[k, self.dim], flat(&g.vars))?));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let c = Container::read(path)?;
        let meta = |k: &str| -> Result<usize> {
            c.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("missing metadata `{k}`")))
        };
        let (num_units, states_per_unit, dim) = (meta("num_units")?, meta("states_per_unit")?, meta("dim")?);
        let self_loop = c.tensor("self_loop")?.into_data();
        let mut emissions = Vec::with_capacity(self_loop.len());
        for s in 0..self_loop.len() {
            let rows = |t: Tensor| t.data().chunks(dim).map(<[f64]>::to_vec).collect::<Vec<_>>();
            emissions.push(Gmm {
                weights: c.tensor(&format!("gmm.{s}.weights"))?.into_data(),
                means: rows(c.tensor(&format!("gmm.{s}.means"))?),
                vars: rows(c.tensor(&format!("gmm.{s}.vars"))?),
            });
        }
        let model = Self {
            num_units,
            states_per_unit,
            dim,
            self_loop,
            emissions,
        };
        Ok((model, c.meta.get("config_hash").cloned()))
    }
}

/// Best left-to-right path through `n` chained states given per-frame
/// emission scores `emit[t][j]` and per-state self-loop log-probabilities.
/// Returns the state index per frame and the path score, which includes the
/// exit from the last state.
pub fn viterbi(emit: &[Vec<f64>], log_stay: &[f64], log_move: &[f64]) -> Result<(Vec<usize>, f64)> {
    let t_len = emit.len();
    let n = log_stay.len();
    if n == 0 {
        return Err(Error::Empty("no HMM states to align".into()));
    }
    if t_len < n {
        return Err(Error::AlignmentInfeasible(format!(
            "{t_len} frames cannot visit {n} states"
        )));
    }
    let neg = f64::NEG_INFINITY;
    let mut prev = vec![neg; n];
    prev[0] = emit[0][0];
    // true = arrived from the previous state.
    let mut back = vec![vec![false; n]; t_len];
    for t in 1..t_len {
        let mut cur = vec![neg; n];
        // State j is reachable at frame t only if j <= t and the remaining
        // frames can still cover the remaining states.
        let lo = (n + t).saturating_sub(t_len);
        let hi = t.min(n - 1);
        for j in lo..=hi {
            let stay = prev[j] + log_stay[j];
            let adv = if j > 0 { prev[j - 1] + log_move[j - 1] } else { neg };
            if adv > stay {
                cur[j] = adv + emit[t][j];
                back[t][j] = true;
            } else {
                cur[j] = stay + emit[t][j];
            }
        }
        prev = cur;
    }
    let score = prev[n - 1] + log_move[n - 1];
    let mut path = vec![0; t_len];
    let mut j = n - 1;
    for t in (0..t_len).rev() {
        path[t] = j;
        if t > 0 && back[t][j] {
            j -= 1;
        }
    }
    Ok((path, score))
}

fn transition_logs(model: &HmmModel, states: &[usize]) -> (Vec<f64>, Vec<f64>) {
    states
        .iter()
        .map(|&s| (model.self_loop[s].ln(), (1.0 - model.self_loop[s]).ln()))
        .unzip()
}

/// Aligns one utterance, returning senone labels and the best-path score.
pub fn forced_align_scored(model: &HmmModel, utt: &Utterance) -> Result<(AlignmentLabels, f64)> {
    if utt.transcript.is_empty() {
        return Err(Error::Empty(format!("{}: empty transcript", utt.id)));
    }
    let x = utt.audio.frames();
    if x.cols() != model.dim {
        return Err(Error::Config(format!(
            "{}: feature dim {} but model expects {}",
            utt.id,
            x.cols(),
            model.dim
        )));
    }
    let states = model.unit_states(&utt.transcript)?;
    if x.rows() < states.len() {
        return Err(Error::AlignmentInfeasible(format!(
            "{}: {} frames cannot cover {} states",
            utt.id,
            x.rows(),
            states.len()
        )));
    }
    // Emission scores are shared by every occurrence of a senone.
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; model.num_senones()];
    for &s in &states {
        if cache[s].is_none() {
            let g = &model.emissions[s];
            cache[s] = Some((0..x.rows()).map(|t| g.log_likelihood(x.row(t))).collect());
        }
    }
    let emit: Vec<Vec<f64>> = (0..x.rows())
        .map(|t| states.iter().map(|&s| cache[s].as_ref().unwrap()[t]).collect())
        .collect();
    let (log_stay, log_move) = transition_logs(model, &states);
    let (path, score) = viterbi(&emit, &log_stay, &log_move)?;
    let labels = path.into_iter().map(|j| states[j]).collect();
    Ok((
        AlignmentLabels {
            utt_id: utt.id.clone(),
            labels,
            num_senones: model.num_senones(),
        },
        score,
    ))
}

pub fn forced_align(model: &HmmModel, utt: &Utterance) -> Result<AlignmentLabels> {
    forced_align_scored(model, utt).map(|(a, _)| a)
}

/// Score of an explicit senone path, recomputed frame by frame.
pub fn path_score(model: &HmmModel, utt: &Utterance, labels: &[usize]) -> f64 {
    let x = utt.audio.frames();
    let mut s = 0.0;
    for (t, &l) in labels.iter().enumerate() {
        s += model.emissions[l].log_likelihood(x.row(t));
        let p = model.self_loop[l];
        let leaving = labels.get(t + 1).is_none_or(|&n| n != l);
        s += if leaving { (1.0 - p).ln() } else { p.ln() };
    }
    s
}

/// Uniform segmentation of every utterance over its transcript's states,
/// single-Gaussian emissions from the segment statistics, transitions 0.5.
pub fn flat_start(utts: &[Utterance], num_units: usize, states_per_unit: usize) -> Result<HmmModel> {
    if states_per_unit == 0 {
        return Err(Error::Config("states_per_unit must be >= 1".into()));
    }
    let dim = utts
        .first()
        .map(|u| u.audio.dim())
        .ok_or_else(|| Error::Empty("no utterances for GMM-HMM training".into()))?;
    let mut model = HmmModel {
        num_units,
        states_per_unit,
        dim,
        self_loop: vec![0.5; num_units * states_per_unit],
        emissions: Vec::new(),
    };
    let n_sen = model.num_senones();
    let mut occ = vec![0usize; n_sen];
    let mut s1 = vec![vec![0.0; dim]; n_sen];
    let mut s2 = vec![vec![0.0; dim]; n_sen];
    for u in utts {
        let states = model.unit_states(&u.transcript)?;
        let x = u.audio.frames();
        let (t_len, n) = (x.rows(), states.len());
        if t_len < n {
            return Err(Error::AlignmentInfeasible(format!(
                "{}: {t_len} frames cannot cover {n} states",
                u.id
            )));
        }
        for (k, &s) in states.iter().enumerate() {
            for t in k * t_len / n..(k + 1) * t_len / n {
                occ[s] += 1;
                for (j, v) in x.row(t).iter().enumerate() {
                    s1[s][j] += v;
                    s2[s][j] += v * v;
                }
            }
        }
    }
    for s in 0..n_sen {
        if occ[s] == 0 {
            return Err(Error::Training(format!(
                "unit {} never appears in the training transcripts",
                s / states_per_unit
            )));
        }
        let n = occ[s] as f64;
        let mean: Vec<f64> = s1[s].iter().map(|v| v / n).collect();
        let var = s2[s]
            .iter()
            .zip(&mean)
            .map(|(v, m)| (v / n - m * m).max(VARIANCE_FLOOR))
            .collect();
        model.emissions.push(Gmm::single(mean, var));
    }
    Ok(model)
}

/// Viterbi EM. Before iteration `i` every GMM is grown to
/// `schedule.0[i]` components by splitting.
pub fn em_train(
    mut model: HmmModel,
    utts: &[Utterance],
    iters: usize,
    schedule: &MixSchedule,
) -> Result<(HmmModel, EmReport)> {
    if iters == 0 {
        return Err(Error::Config("em_train needs at least one iteration".into()));
    }
    if schedule.0.len() < iters {
        return Err(Error::Config(format!(
            "mixture schedule covers {} of {iters} iterations",
            schedule.0.len()
        )));
    }
    let mut report = EmReport::default();
    let n_sen = model.num_senones();
    for &target in schedule.0.iter().take(iters) {
        for g in &mut model.emissions {
            while g.num_components() < target {
                g.split_largest();
            }
        }
        let mut total = 0.0;
        let mut stays = vec![0usize; n_sen];
        let mut exits = vec![0usize; n_sen];
        let mut frames: Vec<Vec<&[f64]>> = vec![Vec::new(); n_sen];
        for u in utts {
            let (ali, score) = forced_align_scored(&model, u)?;
            total += score;
            let x = u.audio.frames();
            for (t, &l) in ali.labels.iter().enumerate() {
                frames[l].push(x.row(t));
                if ali.labels.get(t + 1) == Some(&l) {
                    stays[l] += 1;
                } else {
                    exits[l] += 1;
                }
            }
        }
        report.objective.push(total);
        report
            .components
            .push(model.emissions.iter().map(Gmm::num_components).max().unwrap_or(0));
        for s in 0..n_sen {
            let n = stays[s] + exits[s];
            if n > 0 {
                model.self_loop[s] =
                    (stays[s] as f64 / n as f64).clamp(MIN_TRANSITION, 1.0 - MIN_TRANSITION);
            }
            model.emissions[s].em_step(&frames[s], s);
        }
    }
    Ok((model, report))
}

/// Fraction of gold state boundaries matched within `tol` frames by the
/// corresponding boundary of `hyp`. Both must be full left-to-right paths
/// through the same state sequence.
pub fn boundary_agreement(gold: &[usize], hyp: &[usize], tol: usize) -> (usize, usize) {
    let bounds = |l: &[usize]| -> Vec<usize> { (1..l.len()).filter(|&t| l[t] != l[t - 1]).collect() };
    let (g, h) = (bounds(gold), bounds(hyp));
    let hits = g
        .iter()
        .zip(&h)
        .filter(|(a, b)| a.abs_diff(**b) <= tol)
        .count();
    (hits, g.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, FeatureSequence, VideoSequence};

    fn utt(id: &str, frames: Vec<Vec<f64>>, transcript: Vec<usize>) -> Utterance {
        let t = frames.len();
        Utterance {
            id: id.into(),
            audio: FeatureSequence::new(Tensor::from_rows(&frames).unwrap()).unwrap(),
            video: VideoSequence::new(Tensor::zeros(&[t.div_ceil(4).max(1), 1, 1])).unwrap(),
            transcript,
            gold_alignment: Vec::new(),
        }
    }

    #[test]
    fn flat_start_splits_uniformly() {
        let frames: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64]).collect();
        let m = flat_start(&[utt("a", frames, vec![0])], 1, 3).unwrap();
        let means: Vec<f64> = m.emissions.iter().map(|g| g.means[0][0]).collect();
        assert_eq!(means, [1.5, 5.5, 9.5]);
        assert_eq!(m.self_loop, [0.5; 3]);
    }

    #[test]
    fn flat_start_floors_variance_and_names_missing_units() {
        let frames = vec![vec![2.0]; 6];
        let m = flat_start(&[utt("a", frames.clone(), vec![0])], 1, 3).unwrap();
        assert!(m.emissions.iter().all(|g| g.vars[0][0] == VARIANCE_FLOOR));
        match flat_start(&[utt("a", frames, vec![0])], 2, 3) {
            Err(Error::Training(m)) => assert!(m.contains("unit 1"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_gaussian_mle() {
        let u = utt("a", vec![vec![1.0], vec![3.0]], vec![0]);
        let m = flat_start(&[u.clone()], 1, 1).unwrap();
        let (m, _) = em_train(m, &[u], 3, &MixSchedule::fixed(3, 1)).unwrap();
        assert!((m.emissions[0].means[0][0] - 2.0).abs() < 1e-12);
        assert!((m.emissions[0].vars[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_free_state_means_equal_templates() {
        let spec = CorpusSpec {
            num_units: 3,
            feature_dim: 5,
            video_height: 2,
            video_width: 2,
            num_utterances: 30,
            noise_std: 0.0,
            ..Default::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let m = flat_start(&c.utterances, 3, 3).unwrap();
        let (m, _) = em_train(m, &c.utterances, 4, &MixSchedule::fixed(4, 1)).unwrap();
        for u in 0..3 {
            for s in 0..3 {
                let mean = &m.emissions[u * 3 + s].means[0];
                let tmpl = c.audio_templates[u].row(s);
                let err = mean.iter().zip(tmpl).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "unit {u} state {s}: {err}");
            }
        }
    }

    #[test]
    fn forced_path_for_minimal_length() {
        let u = utt("a", vec![vec![0.0]; 3], vec![1]);
        let m = flat_start(&[utt("b", vec![vec![0.0]; 6], vec![0, 1])], 2, 3).unwrap();
        assert_eq!(forced_align(&m, &u).unwrap().labels, [3, 4, 5]);
        let short = utt("c", vec![vec![0.0]; 5], vec![0, 1]);
        assert!(matches!(forced_align(&m, &short), Err(Error::AlignmentInfeasible(_))));
    }

    #[test]
    fn viterbi_score_matches_recomputation_and_shift() {
        let spec = CorpusSpec {
            num_units: 4,
            feature_dim: 4,
            video_height: 2,
            video_width: 2,
            num_utterances: 8,
            noise_std: 0.5,
            ..Default::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let m = flat_start(&c.utterances, 4, 3).unwrap();
        for u in &c.utterances {
            let (ali, score) = forced_align_scored(&m, u).unwrap();
            assert_eq!(ali.labels.len(), u.audio.len());
            assert!((path_score(&m, u, &ali.labels) - score).abs() < 1e-8);
        }
        let emit: Vec<Vec<f64>> = (0..7).map(|t| (0..3).map(|j| ((t * 7 + j * 3) % 5) as f64).collect()).collect();
        let shifted: Vec<Vec<f64>> = emit.iter().map(|r| r.iter().map(|v| v - 42.0).collect()).collect();
        let ls = [0.6f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let lm = [0.4f64.ln(), 0.7f64.ln(), 0.5f64.ln()];
        assert_eq!(viterbi(&emit, &ls, &lm).unwrap().0, viterbi(&shifted, &ls, &lm).unwrap().0);
    }

    #[test]
    fn doubling_schedule() {
        assert_eq!(MixSchedule::doubling(9, 4).0, [1, 1, 1, 2, 2, 2, 4, 4, 4]);
        assert_eq!(MixSchedule::doubling(3, 2).0, [1, 2, 2]);
    }

    #[test]
    fn inventory_is_row_major_bijection() {
        let inv = SenoneInventory {
            num_units: 4,
            states_per_unit: 3,
        };
        assert_eq!(inv.size(), 12);
        assert_eq!(inv.id(2, 1), 7);
        for id in 0..12 {
            let (u, s) = inv.pair(id);
            assert_eq!(inv.id(u, s), id);
        }
    }

    #[test]
    fn split_moves_means_by_tenth_sigma() {
        let mut g = Gmm::single(vec![1.0], vec![4.0]);
        g.split_largest();
        assert_eq!(g.weights, [0.5, 0.5]);
        assert_eq!(g.means, [vec![1.2], vec![0.8]]);
    }

    #[test]
    fn save_load_round_trip() {
        let frames: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64, 1.0]).collect();
        let u = utt("a", frames, vec![0]);
        let m = flat_start(&[u.clone()], 1, 3).unwrap();
        let (m, _) = em_train(m, &[u], 3, &MixSchedule::doubling(3, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gmm.avna");
        m.save(&p, Some("h")).unwrap();
        let (back, hash) = HmmModel::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(hash.as_deref(), Some("h"));
    }
}
