//! The (1+λ) evolutionary search: child generation, fitness by training and validation
//! PSNR, elitist selection with neutral drift, logging, checkpoint/resume and fine-tuning.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::arch::{arch_to_string, expand, is_buildable, TaskMode};
use crate::cgp::{
    build_type_table, decode, genotype_from_text, genotype_to_text, minimal_genotype, mutate_child,
    neutral_modify, Genotype, NodeTypeTable, DEFAULT_MAX_MUTATION_ATTEMPTS,
};
use crate::data::{fixed_pairs, Corruption, CorruptionSpec, Image, ImageSet, TrainingBatches};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, QualityReport};
use crate::nn::{train_steps, weights_from_bytes, weights_to_bytes, Identity, TrainTrace, TrainableNetwork};
use crate::seed::{derive, derived_rng, stream};

/// Search hyperparameters. The defaults are the full-scale values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvoConfig {
    pub generations: usize,
    pub mutation_rate: f64,
    pub children: usize,
    pub rows: usize,
    pub cols: usize,
    pub level_back: usize,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub mode: TaskMode,
    pub corruption: CorruptionSpec,
    pub input_channels: usize,
    /// Side length of the square network input.
    pub input_size: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Children evaluated concurrently; 0 uses every available core.
    pub parallel_width: usize,
    /// Generations between checkpoints; 0 disables checkpointing.
    pub checkpoint_interval: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            generations: 250,
            mutation_rate: 0.1,
            children: 4,
            rows: 3,
            cols: 20,
            level_back: 5,
            filters: vec![64, 128, 256],
            kernels: vec![1, 3, 5],
            mode: TaskMode::Inpainting,
            corruption: CorruptionSpec::new(Corruption::Pixel {
                drop_probability: crate::data::DEFAULT_PIXEL_DROP,
            }),
            input_channels: 3,
            input_size: 64,
            iterations: 20_000,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 0,
            parallel_width: 1,
            checkpoint_interval: 1,
        }
    }
}

impl EvoConfig {
    pub fn full() -> Self {
        Self::default()
    }

    /// Scaled-down preset for runs of a few minutes on one desktop machine.
    pub fn desk() -> Self {
        Self {
            generations: 20,
            rows: 3,
            cols: 10,
            level_back: 3,
            filters: vec![8, 16, 32],
            kernels: vec![1, 3, 5],
            input_channels: 1,
            input_size: 16,
            iterations: 200,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn type_table(&self) -> Result<NodeTypeTable> {
        build_type_table(&self.filters, &self.kernels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.generations == 0 || self.children == 0 || self.iterations == 0 || self.batch_size == 0 {
            return bad("generations, children, iterations and batch_size must be at least 1".into());
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate <= 1.0) {
            return bad(format!("mutation_rate {} must lie in (0, 1]", self.mutation_rate));
        }
        if self.rows == 0 || self.cols == 0 || self.level_back == 0 {
            return bad("rows, cols and level_back must be at least 1".into());
        }
        if self.level_back > self.cols {
            return bad(format!("level_back {} exceeds cols {}", self.level_back, self.cols));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return bad(format!("input_channels must be 1 or 3, not {}", self.input_channels));
        }
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        self.corruption.validate()?;
        self.type_table()?;
        Ok(())
    }

    fn input_hw(&self) -> (usize, usize) {
        (self.input_size, self.input_size)
    }

    fn buildable(&self, spec: &crate::cgp::EncoderSpec) -> bool {
        is_buildable(spec, self.mode, self.input_channels, self.input_hw())
    }
}

/// Validation PSNR in dB, or the invalid sentinel. `Invalid` sorts below every score and
/// `+∞` above every finite one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fitness {
    Invalid,
    Psnr(f64),
}

impl Fitness {
    pub fn from_psnr(v: f64) -> Self {
        if v.is_nan() || v == f64::NEG_INFINITY {
            Fitness::Invalid
        } else {
            Fitness::Psnr(v)
        }
    }

    pub fn psnr(self) -> Option<f64> {
        match self {
            Fitness::Invalid => None,
            Fitness::Psnr(v) => Some(v),
        }
    }

    pub fn is_valid(self) -> bool {
        matches!(self, Fitness::Psnr(_))
    }
}

impl Eq for Fitness {}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fitness {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Fitness::Invalid, Fitness::Invalid) => Ordering::Equal,
            (Fitness::Invalid, _) => Ordering::Less,
            (_, Fitness::Invalid) => Ordering::Greater,
            (Fitness::Psnr(a), Fitness::Psnr(b)) => a.total_cmp(b),
        }
    }
}

impl fmt::Display for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fitness::Invalid => write!(f, "invalid"),
            Fitness::Psnr(v) if v.is_infinite() => write!(f, "inf"),
            Fitness::Psnr(v) => write!(f, "{v:.4}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FitnessRepr {
    Number(f64),
    Text(String),
}

// JSON has no infinity, so +∞ is written as the string "inf" and Invalid as null.
impl Serialize for Fitness {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Fitness::Invalid => s.serialize_none(),
            Fitness::Psnr(v) if v.is_infinite() => s.serialize_str("inf"),
            Fitness::Psnr(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Fitness {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<FitnessRepr>::deserialize(d)? {
            None => Ok(Fitness::Invalid),
            Some(FitnessRepr::Number(v)) => Ok(Fitness::from_psnr(v)),
            Some(FitnessRepr::Text(t)) if t == "inf" => Ok(Fitness::Psnr(f64::INFINITY)),
            Some(FitnessRepr::Text(t)) => Err(serde::de::Error::custom(format!("bad fitness {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genotype: Genotype,
    pub fitness: Fitness,
    pub arch: String,
}

/// An evaluated individual together with its trained network, when training succeeded.
pub struct Evaluation {
    pub individual: Individual,
    pub network: Option<TrainableNetwork<f32>>,
}

/// Validation pairs frozen once per run so every child is scored on identical inputs.
pub struct ValidationSet {
    pub pairs: Vec<(Image, Image)>,
    pub labels: Vec<String>,
}

impl ValidationSet {
    pub fn prepare(val: &ImageSet, cfg: &EvoConfig) -> Result<Self> {
        check_set(val, cfg, "validation")?;
        Ok(Self {
            pairs: fixed_pairs(val, cfg.input_hw(), &cfg.corruption, derive(cfg.seed, &[stream::VALIDATION]))?,
            labels: val.labels.clone(),
        })
    }
}

fn check_set(set: &ImageSet, cfg: &EvoConfig, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    if set.channels() != Some(cfg.input_channels) {
        return Err(Error::Config(format!(
            "{what} images have {:?} channels, config expects {}",
            set.channels(),
            cfg.input_channels
        )));
    }
    Ok(())
}

/// Trains the decoded network of `genotype` for `cfg.iterations` steps and scores it by
/// mean per-image PSNR on the validation pairs. Every random draw comes from `eval_seed`.
pub fn evaluate_fitness(
    genotype: &Genotype,
    table: &NodeTypeTable,
    cfg: &EvoConfig,
    train: &ImageSet,
    val: &ValidationSet,
    eval_seed: u64,
) -> Result<Evaluation> {
    let spec = decode(genotype, table).spec;
    let arch = arch_to_string(&spec);
    let invalid = |reason: &str| {
        debug!("{arch}: invalid fitness ({reason})");
        Ok(Evaluation {
            individual: Individual {
                genotype: genotype.clone(),
                fitness: Fitness::Invalid,
                arch: arch.clone(),
            },
            network: None,
        })
    };
    let cae = match expand(&spec, cfg.mode, cfg.input_channels, cfg.input_hw()) {
        Ok(c) => c,
        Err(e) => return invalid(&e.to_string()),
    };
    let mut net = TrainableNetwork::init(&cae, &mut derived_rng(eval_seed, &[stream::WEIGHTS]))?;
    let mut batches = TrainingBatches::new(
        train,
        cfg.input_hw(),
        cfg.batch_size,
        cfg.corruption,
        derived_rng(eval_seed, &[stream::TRAIN]),
    )?;
    match train_steps(&mut net, &mut batches, cfg.iterations, cfg.learning_rate, &[]) {
        Ok(_) => {}
        Err(e @ Error::Diverged { .. }) => {
            warn!("{arch}: {e}");
            return invalid("diverged");
        }
        Err(e) => return Err(e),
    }
    let report = evaluate_pairs(&net, &val.pairs, &val.labels)?;
    Ok(Evaluation {
        individual: Individual {
            genotype: genotype.clone(),
            fitness: Fitness::from_psnr(report.mean_psnr),
            arch,
        },
        network: Some(net),
    })
}

/// One line of the per-generation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub parent_psnr: Fitness,
    pub best_child_psnr: Fitness,
    pub arch: String,
    pub replaced: bool,
    pub child_psnr: Vec<Fitness>,
    /// Wall time of the generation; the only field that varies between identical runs.
    pub seconds: f64,
}

impl GenerationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// The record with its timing field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Search state between generations.
pub struct EvoState {
    /// Number of completed generations.
    pub generation: usize,
    pub parent: Individual,
    pub parent_network: Option<TrainableNetwork<f32>>,
    pub initial_fitness: Fitness,
    pub log: Vec<GenerationRecord>,
}

pub struct EvoOutcome {
    pub best: Individual,
    pub best_network: Option<TrainableNetwork<f32>>,
    pub initial_fitness: Fitness,
    pub log: Vec<GenerationRecord>,
    /// False when a hook stopped the run early.
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Evaluates the minimal initial parent.
pub fn initial_state(cfg: &EvoConfig, train: &ImageSet, val: &ValidationSet) -> Result<EvoState> {
    cfg.validate()?;
    check_set(train, cfg, "training")?;
    let table = cfg.type_table()?;
    let genotype = minimal_genotype(
        cfg.rows,
        cfg.cols,
        cfg.level_back,
        &table,
        &mut derived_rng(cfg.seed, &[stream::INIT_PARENT]),
    )?;
    if !cfg.buildable(&decode(&genotype, &table).spec) {
        return Err(Error::Config(format!(
            "initial architecture {} does not fit a {}x{} input",
            arch_to_string(&decode(&genotype, &table).spec),
            cfg.input_size,
            cfg.input_size
        )));
    }
    let eval = evaluate_fitness(&genotype, &table, cfg, train, val, derive(cfg.seed, &[stream::INIT_PARENT, 0]))?;
    info!("initial parent {} fitness {}", eval.individual.arch, eval.individual.fitness);
    Ok(EvoState {
        generation: 0,
        initial_fitness: eval.individual.fitness,
        parent: eval.individual,
        parent_network: eval.network,
        log: Vec::new(),
    })
}

/// Runs one generation: λ children, parallel evaluation, strict-improvement selection,
/// neutral drift otherwise.
pub fn step_generation(
    cfg: &EvoConfig,
    table: &NodeTypeTable,
    state: &mut EvoState,
    train: &ImageSet,
    val: &ValidationSet,
) -> Result<GenerationRecord> {
    let started = Instant::now();
    let generation = state.generation + 1;
    let g = generation as u64;
    let children: Vec<Genotype> = (0..cfg.children)
        .map(|i| {
            mutate_child(
                &state.parent.genotype,
                table,
                cfg.mutation_rate,
                &mut derived_rng(cfg.seed, &[stream::MUTATE, g, i as u64]),
                DEFAULT_MAX_MUTATION_ATTEMPTS,
                |spec| cfg.buildable(spec),
            )
        })
        .collect::<Result<_>>()?;
    let evaluate = |(i, child): (usize, &Genotype)| {
        evaluate_fitness(child, table, cfg, train, val, derive(cfg.seed, &[g, i as u64]))
    };
    let evaluations: Vec<Evaluation> = if cfg.parallel_width == 1 {
        children.iter().enumerate().map(evaluate).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel_width)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| children.par_iter().enumerate().map(evaluate).collect::<Result<_>>())?
    };

    let mut best = 0;
    for (i, e) in evaluations.iter().enumerate() {
        if e.individual.fitness > evaluations[best].individual.fitness {
            best = i;
        }
    }
    let child_psnr: Vec<Fitness> = evaluations.iter().map(|e| e.individual.fitness).collect();
    let best_fitness = child_psnr[best];
    let replaced = best_fitness > state.parent.fitness;
    if replaced {
        let winner = evaluations.into_iter().nth(best).expect("best index in range");
        state.parent = winner.individual;
        state.parent_network = winner.network;
    } else {
        let modified = neutral_modify(
            &state.parent.genotype,
            table,
            cfg.mutation_rate,
            &mut derived_rng(cfg.seed, &[stream::MODIFY, g]),
        );
        if modified.noop {
            debug!("generation {generation}: no non-functioning node to modify");
        }
        state.parent.genotype = modified.genotype;
    }
    state.generation = generation;
    let record = GenerationRecord {
        generation,
        parent_psnr: state.parent.fitness,
        best_child_psnr: best_fitness,
        arch: state.parent.arch.clone(),
        replaced,
        child_psnr,
        seconds: started.elapsed().as_secs_f64(),
    };
    info!(
        "generation {generation}: parent {} best child {} {}",
        record.parent_psnr, record.best_child_psnr, record.arch
    );
    state.log.push(record.clone());
    Ok(record)
}

/// Continues `state` (or a fresh initial parent) until `cfg.generations`, calling `hook`
/// after every generation.
pub fn run_evolution_with(
    cfg: &EvoConfig,
    train: &ImageSet,
    val: &ImageSet,
    resume: Option<EvoState>,
    hook: &mut dyn FnMut(&EvoState, &GenerationRecord) -> Result<Control>,
) -> Result<EvoOutcome> {
    cfg.validate()?;
    check_set(train, cfg, "training")?;
    let table = cfg.type_table()?;
    let val = ValidationSet::prepare(val, cfg)?;
    let mut state = match resume {
        Some(s) => s,
        None => initial_state(cfg, train, &val)?,
    };
    let mut completed = true;
    while state.generation < cfg.generations {
        let record = step_generation(cfg, &table, &mut state, train, &val)?;
        if hook(&state, &record)? == Control::Stop && state.generation < cfg.generations {
            completed = false;
            break;
        }
    }
    Ok(EvoOutcome {
        best: state.parent,
        best_network: state.parent_network,
        initial_fitness: state.initial_fitness,
        log: state.log,
        completed,
    })
}

pub fn run_evolution(cfg: &EvoConfig, train: &ImageSet, val: &ImageSet) -> Result<EvoOutcome> {
    run_evolution_with(cfg, train, val, None, &mut |_, _| Ok(Control::Continue))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECAECKP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized [`EvoState`]. Random streams are derived from the master seed and the
/// generation index, so no generator state needs to be stored.
///
/// Layout (little-endian): magic, u32 version, config JSON, u64 completed generations,
/// parent genotype text, parent fitness, parent arch, initial fitness, u32 record count
/// and one JSON log line per record, then a u8 flag followed by the parent's weight
/// checkpoint when present. Strings are u64 length-prefixed UTF-8; fitness is a u8 tag
/// (0 invalid, 1 score) and an f64.
pub struct EvoCheckpoint;

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn write_fitness(w: &mut impl Write, f: Fitness) -> std::io::Result<()> {
    match f {
        Fitness::Invalid => {
            w.write_u8(0)?;
            w.write_f64::<LittleEndian>(0.0)
        }
        Fitness::Psnr(v) => {
            w.write_u8(1)?;
            w.write_f64::<LittleEndian>(v)
        }
    }
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        what: "evolution checkpoint",
        message: message.into(),
    }
}

const MAX_FIELD_BYTES: u64 = 1 << 32;

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = r.read_u64::<LittleEndian>().map_err(|e| format_err(e.to_string()))?;
    if len > MAX_FIELD_BYTES {
        return Err(format_err(format!("field length {len} is implausible")));
    }
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf).map_err(|e| format_err(e.to_string()))?;
    if buf.len() as u64 != len {
        return Err(format_err("truncated field"));
    }
    Ok(buf)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    String::from_utf8(read_bytes(r)?).map_err(|_| format_err("field is not UTF-8"))
}

fn read_fitness(r: &mut impl Read) -> Result<Fitness> {
    let tag = r.read_u8().map_err(|e| format_err(e.to_string()))?;
    let v = r.read_f64::<LittleEndian>().map_err(|e| format_err(e.to_string()))?;
    match tag {
        0 => Ok(Fitness::Invalid),
        1 => Ok(Fitness::Psnr(v)),
        t => Err(format_err(format!("bad fitness tag {t}"))),
    }
}

impl EvoCheckpoint {
    pub fn to_bytes(cfg: &EvoConfig, state: &EvoState) -> Result<Vec<u8>> {
        let table = cfg.type_table()?;
        let mut w = Vec::new();
        let io = |e: std::io::Error| format_err(e.to_string());
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        write_str(&mut w, &serde_json::to_string(cfg).expect("config serializes")).map_err(io)?;
        w.write_u64::<LittleEndian>(state.generation as u64).map_err(io)?;
        write_str(&mut w, &genotype_to_text(&state.parent.genotype, &table)).map_err(io)?;
        write_fitness(&mut w, state.parent.fitness).map_err(io)?;
        write_str(&mut w, &state.parent.arch).map_err(io)?;
        write_fitness(&mut w, state.initial_fitness).map_err(io)?;
        w.write_u32::<LittleEndian>(state.log.len() as u32).map_err(io)?;
        for r in &state.log {
            write_str(&mut w, &r.to_json_line()).map_err(io)?;
        }
        match &state.parent_network {
            Some(net) => {
                w.write_u8(1).map_err(io)?;
                let bytes = weights_to_bytes(net);
                w.write_u64::<LittleEndian>(bytes.len() as u64).map_err(io)?;
                w.write_all(&bytes).map_err(io)?;
            }
            None => w.write_u8(0).map_err(io)?,
        }
        Ok(w)
    }

    /// Restores a state, returning the configuration it was written with.
    pub fn from_bytes(bytes: &[u8]) -> Result<(EvoConfig, EvoState)> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| format_err(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| format_err(e.to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let cfg: EvoConfig = serde_json::from_str(&read_str(&mut r)?).map_err(|e| format_err(e.to_string()))?;
        let generation = r.read_u64::<LittleEndian>().map_err(|e| format_err(e.to_string()))? as usize;
        let (genotype, _) = genotype_from_text(&read_str(&mut r)?)?;
        let fitness = read_fitness(&mut r)?;
        let arch = read_str(&mut r)?;
        let initial_fitness = read_fitness(&mut r)?;
        let count = r.read_u32::<LittleEndian>().map_err(|e| format_err(e.to_string()))?;
        let log = (0..count)
            .map(|_| {
                serde_json::from_str(&read_str(&mut r)?).map_err(|e| format_err(e.to_string()))
            })
            .collect::<Result<Vec<GenerationRecord>>>()?;
        let parent_network = match r.read_u8().map_err(|e| format_err(e.to_string()))? {
            0 => None,
            1 => Some(weights_from_bytes(&read_bytes(&mut r)?)?),
            t => return Err(format_err(format!("bad weights flag {t}"))),
        };
        if !r.is_empty() {
            return Err(format_err("trailing bytes"));
        }
        Ok((
            cfg,
            EvoState {
                generation,
                parent: Individual {
                    genotype,
                    fitness,
                    arch,
                },
                parent_network,
                initial_fitness,
                log,
            },
        ))
    }

    pub fn write(path: &Path, cfg: &EvoConfig, state: &EvoState) -> Result<()> {
        let bytes = Self::to_bytes(cfg, state)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<(EvoConfig, EvoState)> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    /// Iterations between weight checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 500_000,
            milestones: vec![200_000, 400_000],
            checkpoint_every: 0,
        }
    }
}

impl FinetuneConfig {
    /// Same schedule shape scaled to `iterations`.
    pub fn scaled(iterations: usize) -> Self {
        Self {
            iterations,
            milestones: vec![iterations * 2 / 5, iterations * 4 / 5],
            checkpoint_every: 0,
        }
    }
}

pub struct FinetuneOutcome {
    pub network: TrainableNetwork<f32>,
    pub trace: TrainTrace,
    pub report: QualityReport,
    /// The corrupted test inputs scored as they are, on the same pairs as `report`.
    pub input_report: QualityReport,
}

/// Retrains `genotype` from a fresh initialisation with a stepped learning-rate schedule
/// and scores it on `test`. On divergence the weight checkpoint at `checkpoint`, if any,
/// holds the last weights written before the failure.
pub fn finetune(
    genotype: &Genotype,
    cfg: &EvoConfig,
    ft: &FinetuneConfig,
    train: &ImageSet,
    test: &ImageSet,
    checkpoint: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_set(train, cfg, "training")?;
    check_set(test, cfg, "test")?;
    let table = cfg.type_table()?;
    genotype.validate(&table)?;
    let spec = decode(genotype, &table).spec;
    let cae = expand(&spec, cfg.mode, cfg.input_channels, cfg.input_hw())?;
    let mut net = TrainableNetwork::init(&cae, &mut derived_rng(cfg.seed, &[stream::FINETUNE, stream::WEIGHTS]))?;
    let mut batches = TrainingBatches::new(
        train,
        cfg.input_hw(),
        cfg.batch_size,
        cfg.corruption,
        derived_rng(cfg.seed, &[stream::FINETUNE, stream::TRAIN]),
    )?;
    let segment = match (checkpoint, ft.checkpoint_every) {
        (Some(_), k) if k > 0 => k,
        _ => ft.iterations.max(1),
    };
    let mut trace = TrainTrace::default();
    let mut start = 0;
    while start < ft.iterations {
        let len = segment.min(ft.iterations - start);
        let shifted: Vec<usize> = ft.milestones.iter().map(|m| m.saturating_sub(start)).collect();
        let part = train_steps(&mut net, &mut batches, len, cfg.learning_rate, &shifted).map_err(|e| match e {
            Error::Diverged { iteration, message } => Error::Diverged {
                iteration: iteration + start,
                message,
            },
            other => other,
        })?;
        trace.losses.extend(part.losses);
        trace.learning_rates.extend(part.learning_rates);
        start += len;
        if let Some(path) = checkpoint {
            std::fs::write(path, weights_to_bytes(&net)).map_err(|e| Error::io(path, e))?;
        }
    }
    let pairs = fixed_pairs(test, cfg.input_hw(), &cfg.corruption, derive(cfg.seed, &[stream::FINETUNE, stream::VALIDATION]))?;
    let report = evaluate_pairs(&net, &pairs, &test.labels)?;
    let input_report = evaluate_pairs(&Identity, &pairs, &test.labels)?;
    Ok(FinetuneOutcome {
        network: net,
        trace,
        report,
        input_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind};

    fn toy_cfg(seed: u64) -> EvoConfig {
        EvoConfig {
            generations: 3,
            children: 2,
            rows: 2,
            cols: 5,
            level_back: 2,
            filters: vec![4, 8],
            kernels: vec![1, 3],
            mode: TaskMode::Denoising,
            corruption: CorruptionSpec::new(Corruption::GaussianNoise { sigma: 30.0 }),
            input_channels: 1,
            input_size: 8,
            iterations: 20,
            batch_size: 4,
            seed,
            ..EvoConfig::default()
        }
    }

    fn sets() -> (ImageSet, ImageSet) {
        (
            synth_dataset(SynthKind::Gradients, 16, 8, 1, 1).unwrap(),
            synth_dataset(SynthKind::Gradients, 4, 8, 1, 2).unwrap(),
        )
    }

    #[test]
    fn fitness_order() {
        let mut v = [
            Fitness::Psnr(f64::INFINITY),
            Fitness::Psnr(-3.0),
            Fitness::Invalid,
            Fitness::Psnr(20.0),
        ];
        v.sort();
        assert_eq!(
            v,
            [
                Fitness::Invalid,
                Fitness::Psnr(-3.0),
                Fitness::Psnr(20.0),
                Fitness::Psnr(f64::INFINITY)
            ]
        );
        assert_eq!(Fitness::from_psnr(f64::NAN), Fitness::Invalid);
        for f in v {
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(serde_json::from_str::<Fitness>(&json).unwrap(), f);
        }
        assert_eq!(serde_json::to_string(&Fitness::Invalid).unwrap(), "null");
        assert_eq!(serde_json::to_string(&Fitness::Psnr(f64::INFINITY)).unwrap(), "\"inf\"");
    }

    #[test]
    fn config_validation() {
        assert!(EvoConfig::full().validate().is_ok());
        assert!(EvoConfig::desk().validate().is_ok());
        for bad in [
            EvoConfig { mutation_rate: 0.0, ..EvoConfig::default() },
            EvoConfig { children: 0, ..EvoConfig::default() },
            EvoConfig { level_back: 21, ..EvoConfig::default() },
            EvoConfig { kernels: vec![2], ..EvoConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let text = toml::to_string(&EvoConfig::desk()).unwrap();
        assert_eq!(toml::from_str::<EvoConfig>(&text).unwrap(), EvoConfig::desk());
        let partial: EvoConfig = toml::from_str("generations = 7\n[corruption]\nkind = \"center\"\nside_fraction = 0.5\n").unwrap();
        assert_eq!(partial.generations, 7);
        assert_eq!(partial.corruption.variant, Corruption::Center { side_fraction: 0.5 });
    }

    #[test]
    fn evaluation_is_deterministic_and_invalid_on_bad_arch() {
        let cfg = toy_cfg(3);
        let (train, val) = sets();
        let table = cfg.type_table().unwrap();
        let vs = ValidationSet::prepare(&val, &cfg).unwrap();
        let g = minimal_genotype(2, 5, 2, &table, &mut derived_rng(0, &[])).unwrap();
        let a = evaluate_fitness(&g, &table, &cfg, &train, &vs, 11).unwrap();
        let b = evaluate_fitness(&g, &table, &cfg, &train, &vs, 11).unwrap();
        assert_eq!(a.individual, b.individual);
        assert!(a.individual.fitness.is_valid());

        let tiny = EvoConfig { input_size: 2, mode: TaskMode::Inpainting, ..cfg.clone() };
        let deep = Genotype::from_parts(
            2,
            5,
            5,
            (1..=10)
                .map(|id| crate::cgp::NodeGene {
                    type_id: 0,
                    connection: if id <= 2 { 0 } else { id - 2 },
                })
                .collect(),
            9,
            &table,
        )
        .unwrap();
        let vs2 = ValidationSet {
            pairs: vec![(Image::filled(1, 2, 2, 0.5), Image::filled(1, 2, 2, 0.5))],
            labels: vec!["x".into()],
        };
        let e = evaluate_fitness(&deep, &table, &tiny, &train, &vs2, 0).unwrap();
        assert_eq!(e.individual.fitness, Fitness::Invalid);
        assert!(e.network.is_none());
    }

    #[test]
    fn single_generation_single_child() {
        let cfg = EvoConfig { generations: 1, children: 1, ..toy_cfg(5) };
        let (train, val) = sets();
        let out = run_evolution(&cfg, &train, &val).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].child_psnr.len(), 1);
        assert!(out.log[0].parent_psnr >= out.initial_fitness);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = toy_cfg(9);
        let (train, val) = sets();
        let full = run_evolution(&cfg, &train, &val).unwrap();

        let mut saved = None;
        let partial = run_evolution_with(&cfg, &train, &val, None, &mut |s, r| {
            if r.generation == 1 {
                saved = Some(EvoCheckpoint::to_bytes(&cfg, s)?);
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        })
        .unwrap();
        assert!(!partial.completed);
        let (cfg2, state) = EvoCheckpoint::from_bytes(&saved.unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(state.generation, 1);
        let resumed = run_evolution_with(&cfg2, &train, &val, Some(state), &mut |_, _| Ok(Control::Continue)).unwrap();
        let strip = |l: &[GenerationRecord]| l.iter().map(|r| r.without_timing().to_json_line()).collect::<Vec<_>>();
        assert_eq!(strip(&full.log), strip(&resumed.log));
        assert_eq!(full.best, resumed.best);

        let mut bytes = EvoCheckpoint::to_bytes(&cfg, &EvoState {
            generation: 0,
            parent: full.best.clone(),
            parent_network: None,
            initial_fitness: Fitness::Invalid,
            log: vec![],
        })
        .unwrap();
        assert!(EvoCheckpoint::from_bytes(&bytes).is_ok());
        bytes.push(0);
        assert!(EvoCheckpoint::from_bytes(&bytes).is_err());
        assert!(EvoCheckpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn finetune_schedule_and_zero_iterations() {
        let cfg = toy_cfg(1);
        let (train, test) = sets();
        let table = cfg.type_table().unwrap();
        let g = minimal_genotype(2, 5, 2, &table, &mut derived_rng(0, &[])).unwrap();
        let zero = finetune(&g, &cfg, &FinetuneConfig::scaled(0), &train, &test, None).unwrap();
        assert_eq!(zero.network.step(), 0);
        assert!(zero.trace.losses.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("w.bin");
        let ft = FinetuneConfig { iterations: 50, milestones: vec![20, 40], checkpoint_every: 15 };
        let out = finetune(&g, &cfg, &ft, &train, &test, Some(&ckpt)).unwrap();
        let mut lrs = out.trace.learning_rates.clone();
        lrs.dedup();
        assert_eq!(lrs.len(), 3);
        assert_eq!(out.trace.learning_rates[19], 0.001);
        assert!((out.trace.learning_rates[20] - 1e-4).abs() < 1e-15);
        assert!((out.trace.learning_rates[40] - 1e-5).abs() < 1e-15);
        let saved = weights_from_bytes(&std::fs::read(&ckpt).unwrap()).unwrap();
        assert_eq!(saved.step(), 50);
        let plain = finetune(&g, &cfg, &FinetuneConfig { checkpoint_every: 0, ..ft }, &train, &test, None).unwrap();
        assert_eq!(plain.trace, out.trace);
    }
}
