//! Offline datasets, segment sampling, the script teacher and on-disk formats.
//!
//! Binary layout shared by both file kinds:
//!
//! ```text
//! magic (8 bytes) | version u32 LE | header length u64 LE | header JSON | records
//! ```
//!
//! Records are little-endian `f64` arrays in a fixed order, so a write/read
//! cycle is bit-exact. Offline datasets keep per-step rewards for the teacher
//! and evaluators; preference files never contain a reward.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{sample_mixture, toy_reward, EnvSpec, MixtureSpec, PointMassEnv, ScriptedPolicy};
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, DenseArray};
use crate::policy::{Segment, SegmentOrigin};

const DATA_MAGIC: &[u8; 8] = b"FKPDDATA";
const PREF_MAGIC: &[u8; 8] = b"FKPDPREF";
const FORMAT_VERSION: u32 = 1;

/// One trajectory; `rewards[i]` follows `actions[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: DenseArray,
    pub actions: DenseArray,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Preference-free dataset D.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<Episode>,
    pub env: Option<EnvSpec>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    state_dim: usize,
    action_dim: usize,
    episodes: usize,
    env: Option<EnvSpec>,
    seed: Option<u64>,
}

impl OfflineDataset {
    pub fn new(state_dim: usize, action_dim: usize, episodes: Vec<Episode>) -> Result<Self> {
        for (i, ep) in episodes.iter().enumerate() {
            if ep.is_empty() || ep.states.rows() != ep.len() || ep.actions.rows() != ep.len() {
                return Err(Error::Shape(format!("episode {i} has inconsistent lengths")));
            }
            if ep.states.cols() != state_dim || ep.actions.cols() != action_dim {
                return Err(Error::Shape(format!("episode {i} has the wrong dimensions")));
            }
        }
        Ok(Self {
            state_dim,
            action_dim,
            episodes,
            env: None,
            seed: None,
        })
    }

    pub fn shortest_episode(&self) -> usize {
        self.episodes.iter().map(Episode::len).min().unwrap_or(0)
    }

    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// All (state, action) rows, for behavior cloning.
    pub fn transitions(&self) -> (DenseArray, DenseArray) {
        let n = self.n_steps();
        let mut s = Vec::with_capacity(n * self.state_dim);
        let mut a = Vec::with_capacity(n * self.action_dim);
        for ep in &self.episodes {
            s.extend_from_slice(ep.states.data());
            a.extend_from_slice(ep.actions.data());
        }
        (
            DenseArray::from_parts(n, self.state_dim, s),
            DenseArray::from_parts(n, self.action_dim, a),
        )
    }

    /// Segment `[start, start + k)` of episode `episode`, reward sum attached.
    pub fn segment(&self, episode: usize, start: usize, k: usize) -> Result<Segment> {
        let ep = self
            .episodes
            .get(episode)
            .ok_or_else(|| Error::InvalidArgument(format!("no episode {episode}")))?;
        if k == 0 || start + k > ep.len() {
            return Err(Error::InvalidArgument(format!(
                "window {start}+{k} exceeds episode length {}",
                ep.len()
            )));
        }
        let reward: f64 = ep.rewards[start..start + k].iter().sum();
        Ok(Segment::new(ep.states.slice_rows(start, start + k), ep.actions.slice_rows(start, start + k))?
            .with_reward_sum(reward)
            .with_origin(SegmentOrigin { episode, start }))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = DatasetHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            episodes: self.episodes.len(),
            env: self.env.clone(),
            seed: self.seed,
        };
        write_preamble(&mut w, DATA_MAGIC, &serde_json::to_vec(&header)?)?;
        for ep in &self.episodes {
            w.write_all(&(ep.len() as u64).to_le_bytes())?;
            write_f64s(&mut w, ep.states.data())?;
            write_f64s(&mut w, ep.actions.data())?;
            write_f64s(&mut w, &ep.rewards)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header: DatasetHeader = serde_json::from_slice(&read_preamble(&mut r, DATA_MAGIC)?)?;
        let mut episodes = Vec::with_capacity(header.episodes);
        for _ in 0..header.episodes {
            let len = read_u64(&mut r)? as usize;
            let states = DenseArray::matrix(len, header.state_dim, read_f64s(&mut r, len * header.state_dim)?)?;
            let actions = DenseArray::matrix(len, header.action_dim, read_f64s(&mut r, len * header.action_dim)?)?;
            let rewards = read_f64s(&mut r, len)?;
            episodes.push(Episode { states, actions, rewards });
        }
        expect_eof(&mut r)?;
        let mut ds = Self::new(header.state_dim, header.action_dim, episodes)?;
        ds.env = header.env;
        ds.seed = header.seed;
        Ok(ds)
    }
}

/// Unconditional toy dataset: each mixture sample is a one-step episode with an empty state.
pub fn toy_dataset<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<OfflineDataset> {
    let samples = sample_mixture(spec, n, rng)?;
    let episodes = (0..n)
        .map(|i| {
            let a = samples.row(i).to_vec();
            Ok(Episode {
                states: DenseArray::zeros(1, 0),
                rewards: vec![toy_reward(&a)],
                actions: DenseArray::matrix(1, 2, a)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = OfflineDataset::new(0, 2, episodes)?;
    ds.env = Some(EnvSpec::Toy { mixture: spec.clone() });
    Ok(ds)
}

/// Episodes of the scripted behavior policy from uniform random starts.
pub fn point_mass_dataset<R: Rng + ?Sized>(env: &PointMassEnv, behavior: &ScriptedPolicy, n_episodes: usize, rng: &mut R) -> Result<OfflineDataset> {
    env.validate()?;
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut pos = env.sample_start(rng);
        let mut s = Vec::with_capacity(2 * env.horizon);
        let mut a = Vec::with_capacity(2 * env.horizon);
        let mut rewards = Vec::with_capacity(env.horizon);
        for _ in 0..env.horizon {
            let act = behavior.act(env, &pos, rng);
            let (next, r) = env.step(&pos, &act)?;
            s.extend_from_slice(&pos);
            a.extend_from_slice(&act);
            rewards.push(r);
            pos = next;
        }
        episodes.push(Episode {
            states: DenseArray::matrix(env.horizon, 2, s)?,
            actions: DenseArray::matrix(env.horizon, 2, a)?,
            rewards,
        });
    }
    let mut ds = OfflineDataset::new(2, 2, episodes)?;
    ds.env = Some(EnvSpec::PointMass {
        env: env.clone(),
        behavior: *behavior,
    });
    Ok(ds)
}

/// `n` windows of length `k`, each uniform over all (episode, start) positions.
pub fn sample_segments<R: Rng + ?Sized>(dataset: &OfflineDataset, k: usize, n: usize, rng: &mut R) -> Result<Vec<Segment>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need n >= 1 segments".into()));
    }
    if dataset.episodes.is_empty() {
        return Err(Error::InvalidArgument("dataset has no episodes".into()));
    }
    if k == 0 || k > dataset.shortest_episode() {
        return Err(Error::InvalidArgument(format!(
            "segment length {k} exceeds shortest episode {}",
            dataset.shortest_episode()
        )));
    }
    // cumulative window counts
    let mut cum = Vec::with_capacity(dataset.episodes.len());
    let mut total = 0usize;
    for ep in &dataset.episodes {
        total += ep.len() - k + 1;
        cum.push(total);
    }
    (0..n)
        .map(|_| {
            let idx = rng.gen_range(0..total);
            let ep = cum.partition_point(|&c| c <= idx);
            let before = if ep == 0 { 0 } else { cum[ep - 1] };
            dataset.segment(ep, idx - before, k)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// 0 gives the deterministic sum-of-rewards comparison.
    pub noise_temp: f64,
    /// Drop exact ties instead of coin-flipping their order.
    pub drop_ties: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            noise_temp: 0.0,
            drop_ties: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMeta {
    pub noise_temp: f64,
    pub tie: bool,
}

/// Winner σ⁺ and loser σ⁻; neither carries a reward.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: Segment,
    pub loser: Segment,
    pub meta: LabelMeta,
}

impl PreferencePair {
    pub fn new(winner: Segment, loser: Segment, meta: LabelMeta) -> Result<Self> {
        if winner.k() != loser.k() || winner.state_dim() != loser.state_dim() || winner.action_dim() != loser.action_dim() {
            return Err(Error::Shape("winner and loser differ in shape".into()));
        }
        Ok(Self {
            winner: winner.erased(),
            loser: loser.erased(),
            meta,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            meta: self.meta,
        }
    }
}

/// Labels a pair by reward sum. With `noise_temp > 0` `seg_a` wins with
/// probability `sigmoid((r_a − r_b) / noise_temp)`; otherwise the larger sum
/// wins and exact ties get a fair-coin order with the tie flag set.
pub fn script_teacher_label<R: Rng + ?Sized>(seg_a: Segment, seg_b: Segment, noise_temp: f64, rng: &mut R) -> Result<PreferencePair> {
    let (ra, rb) = match (seg_a.reward_sum(), seg_b.reward_sum()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidArgument("teacher needs reward sums on both segments".into())),
    };
    if seg_a.k() != seg_b.k() {
        return Err(Error::Shape("segments differ in length".into()));
    }
    if !(noise_temp >= 0.0 && noise_temp.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_temp must be >= 0, got {noise_temp}")));
    }
    let mut tie = false;
    let a_wins = if noise_temp > 0.0 {
        rng.gen::<f64>() < sigmoid((ra - rb) / noise_temp)
    } else if ra == rb {
        tie = true;
        rng.gen_bool(0.5)
    } else {
        ra > rb
    };
    let meta = LabelMeta { noise_temp, tie };
    if a_wins {
        PreferencePair::new(seg_a, seg_b, meta)
    } else {
        PreferencePair::new(seg_b, seg_a, meta)
    }
}

/// D_pref with the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub k: usize,
    pub seed: Option<u64>,
    pub teacher: TeacherConfig,
    pub env: Option<EnvSpec>,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrefHeader {
    state_dim: usize,
    action_dim: usize,
    k: usize,
    pairs: usize,
    seed: Option<u64>,
    teacher: TeacherConfig,
    env: Option<EnvSpec>,
}

/// Samples two windows per pair and labels them.
pub fn build_pref_dataset<R: Rng + ?Sized>(dataset: &OfflineDataset, k: usize, n_pairs: usize, teacher: &TeacherConfig, rng: &mut R) -> Result<PreferenceDataset> {
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut segs = sample_segments(dataset, k, 2, rng)?;
        let b = segs.pop().expect("two segments");
        let a = segs.pop().expect("two segments");
        let pair = script_teacher_label(a, b, teacher.noise_temp, rng)?;
        if teacher.drop_ties && pair.meta.tie {
            continue;
        }
        pairs.push(pair);
    }
    Ok(PreferenceDataset {
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
        k,
        seed: None,
        teacher: *teacher,
        env: dataset.env.clone(),
        pairs,
    })
}

const NO_ORIGIN: u64 = u64::MAX;

impl PreferenceDataset {
    fn header(&self) -> PrefHeader {
        PrefHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            k: self.k,
            pairs: self.pairs.len(),
            seed: self.seed,
            teacher: self.teacher,
            env: self.env.clone(),
        }
    }

    /// Splits off the last `n` pairs (e.g. as a held-out set).
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(at);
        let mut held = self.clone();
        held.pairs = tail;
        (self, held)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_preamble(&mut w, PREF_MAGIC, &serde_json::to_vec(&self.header())?)?;
        for p in &self.pairs {
            w.write_all(&[p.meta.tie as u8])?;
            w.write_all(&p.meta.noise_temp.to_le_bytes())?;
            for seg in [&p.winner, &p.loser] {
                let (e, s) = seg.origin().map_or((NO_ORIGIN, NO_ORIGIN), |o| (o.episode as u64, o.start as u64));
                w.write_all(&e.to_le_bytes())?;
                w.write_all(&s.to_le_bytes())?;
                write_f64s(&mut w, seg.states().data())?;
                write_f64s(&mut w, seg.actions().data())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let h: PrefHeader = serde_json::from_slice(&read_preamble(&mut r, PREF_MAGIC)?)?;
        let mut pairs = Vec::with_capacity(h.pairs);
        for _ in 0..h.pairs {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            if flag[0] > 1 {
                return Err(Error::Format(format!("bad tie flag {}", flag[0])));
            }
            let noise_temp = read_f64s(&mut r, 1)?[0];
            let mut segs = Vec::with_capacity(2);
            for _ in 0..2 {
                let e = read_u64(&mut r)?;
                let s = read_u64(&mut r)?;
                let states = DenseArray::matrix(h.k, h.state_dim, read_f64s(&mut r, h.k * h.state_dim)?)?;
                let actions = DenseArray::matrix(h.k, h.action_dim, read_f64s(&mut r, h.k * h.action_dim)?)?;
                let mut seg = Segment::new(states, actions)?;
                if e != NO_ORIGIN {
                    seg = seg.with_origin(SegmentOrigin {
                        episode: e as usize,
                        start: s as usize,
                    });
                }
                segs.push(seg);
            }
            let loser = segs.pop().expect("two segments");
            let winner = segs.pop().expect("two segments");
            pairs.push(PreferencePair::new(winner, loser, LabelMeta { noise_temp, tie: flag[0] == 1 })?);
        }
        expect_eof(&mut r)?;
        Ok(Self {
            state_dim: h.state_dim,
            action_dim: h.action_dim,
            k: h.k,
            seed: h.seed,
            teacher: h.teacher,
            env: h.env,
            pairs,
        })
    }

    /// Text export: the header on the first line, then one JSON object per pair.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n")?;
        for p in &self.pairs {
            serde_json::to_writer(&mut w, &JsonPair::from(p))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty JSONL file".into()))??;
        let h: PrefHeader = serde_json::from_str(&first)?;
        let mut pairs = Vec::with_capacity(h.pairs);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let jp: JsonPair = serde_json::from_str(&line)?;
            pairs.push(jp.into_pair(&h)?);
        }
        if pairs.len() != h.pairs {
            return Err(Error::Format(format!("header promises {} pairs, found {}", h.pairs, pairs.len())));
        }
        Ok(Self {
            state_dim: h.state_dim,
            action_dim: h.action_dim,
            k: h.k,
            seed: h.seed,
            teacher: h.teacher,
            env: h.env,
            pairs,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonSegment {
    states: Vec<f64>,
    actions: Vec<f64>,
    origin: Option<SegmentOrigin>,
}

#[derive(Serialize, Deserialize)]
struct JsonPair {
    winner: JsonSegment,
    loser: JsonSegment,
    tie: bool,
    noise_temp: f64,
}

impl From<&PreferencePair> for JsonPair {
    fn from(p: &PreferencePair) -> Self {
        let seg = |s: &Segment| JsonSegment {
            states: s.states().data().to_vec(),
            actions: s.actions().data().to_vec(),
            origin: s.origin(),
        };
        Self {
            winner: seg(&p.winner),
            loser: seg(&p.loser),
            tie: p.meta.tie,
            noise_temp: p.meta.noise_temp,
        }
    }
}

impl JsonPair {
    fn into_pair(self, h: &PrefHeader) -> Result<PreferencePair> {
        let seg = |j: JsonSegment| -> Result<Segment> {
            let s = Segment::new(
                DenseArray::matrix(h.k, h.state_dim, j.states)?,
                DenseArray::matrix(h.k, h.action_dim, j.actions)?,
            )?;
            Ok(match j.origin {
                Some(o) => s.with_origin(o),
                None => s,
            })
        };
        PreferencePair::new(
            seg(self.winner)?,
            seg(self.loser)?,
            LabelMeta {
                noise_temp: self.noise_temp,
                tie: self.tie,
            },
        )
    }
}

fn write_preamble(w: &mut impl Write, magic: &[u8; 8], header: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    Ok(())
}

fn read_preamble(r: &mut impl Read, magic: &[u8; 8]) -> Result<Vec<u8>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let len = read_u64(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("header of {len} bytes is implausible")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    Ok(header)
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after last record".into())),
    }
}
