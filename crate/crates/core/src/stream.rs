//! Synthetic lifelong-learning streams: per-task bags of patch embeddings
//! drawn around class prototypes, with the prototypes doubling as the
//! frozen prompt bank.

use std::cell::{Cell, RefCell};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::Bag;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::prompt::{check_permutation, synth_prompt_bank, PromptBank, PromptBankConfig};
use crate::rand_util::{child_seed, gaussian};

const BAG_MAGIC: [u8; 4] = *b"MSBG";
const BAG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub train_bags: usize,
    pub test_bags: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub tasks: Vec<TaskSpec>,
    /// Embedding dimension shared by patches and prompts.
    pub d: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    /// Fraction of each bag's patches drawn around the class prototype; the
    /// rest are background noise.
    pub signal_fraction: f64,
    pub noise_std: f64,
    pub rho_in: f64,
    pub rho_out: f64,
    /// Similarity of same-named classes across tasks; `None` falls back to
    /// `rho_out`.
    pub rho_shared: Option<f64>,
    pub normalize: bool,
    /// Number of acquisition sites; 0 disables site structure.
    pub sites: usize,
    /// Std of the per-site additive shift applied to every patch.
    pub shift_std: f64,
    pub stream_seed: u64,
    pub fold: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("stream needs at least one task".into()));
        }
        for task in &self.tasks {
            if task.classes.len() < 2 {
                return Err(Error::InvalidConfig(format!(
                    "task {:?} needs at least 2 classes",
                    task.name
                )));
            }
            for class in &task.classes {
                if class.train_bags == 0 || class.test_bags == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "class {:?} of task {:?} needs at least 1 train and 1 test bag",
                        class.name, task.name
                    )));
                }
            }
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "signal fraction {} outside (0, 1]",
                self.signal_fraction
            )));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return Err(Error::InvalidConfig(format!(
                "patch range {}..{} is empty",
                self.patches_min, self.patches_max
            )));
        }
        if self.noise_std < 0.0 || self.shift_std < 0.0 {
            return Err(Error::InvalidConfig("negative std".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        Ok(())
    }

    /// Six-task default shaped after a typical cancer-subtyping benchmark at
    /// one tenth scale: three data-rich tasks followed by three rare ones,
    /// keeping the common-vs-rare imbalance that drives order experiments.
    pub fn default_desk(stream_seed: u64, fold: u64) -> StreamConfig {
        let task = |name: &str, classes: &[(&str, usize, usize)]| TaskSpec {
            name: name.into(),
            classes: classes
                .iter()
                .map(|&(n, train, test)| ClassSpec {
                    name: n.into(),
                    train_bags: train,
                    test_bags: test,
                })
                .collect(),
        };
        StreamConfig {
            tasks: vec![
                task("brca", &[("idc", 66, 7), ("ilc", 10, 5)]),
                task("rcc", &[("ccrcc", 45, 5), ("prcc", 24, 5), ("chrcc", 7, 5)]),
                task("nsclc", &[("scc", 76, 9), ("adeno", 6, 5)]),
                task("esca", &[("scc", 6, 5), ("adeno", 5, 5)]),
                task("tgct", &[("seminoma", 5, 5), ("mgct", 5, 5)]),
                task("cesc", &[("adeno", 22, 5), ("scc", 5, 5)]),
            ],
            d: 32,
            patches_min: 40,
            patches_max: 120,
            signal_fraction: 0.4,
            noise_std: 0.5,
            rho_in: 0.55,
            rho_out: 0.0,
            rho_shared: Some(0.4),
            normalize: false,
            sites: 0,
            shift_std: 0.0,
            stream_seed,
            fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<Bag>,
    pub test: Vec<Bag>,
}

/// One record in the train-bag access log: which task was being processed
/// when training bags of which task were read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainAccess {
    pub processing_task: Option<usize>,
    pub accessed_task: usize,
}

/// A generated stream. Training-bag reads go through [`Stream::train_bags`]
/// and are logged against the currently processed task, so the no-rehearsal
/// property of the merge methods is checkable.
#[derive(Debug)]
pub struct Stream {
    tasks: Vec<TaskData>,
    bank: PromptBank,
    phase: Cell<Option<usize>>,
    log: RefCell<Vec<TrainAccess>>,
}

impl PartialEq for Stream {
    fn eq(&self, other: &Stream) -> bool {
        self.tasks == other.tasks && self.bank == other.bank
    }
}

impl Stream {
    pub fn new(tasks: Vec<TaskData>, bank: PromptBank) -> Stream {
        Stream {
            tasks,
            bank,
            phase: Cell::new(None),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_name(&self, t: usize) -> &str {
        &self.tasks[t].name
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    /// Mark the start of task `t`'s processing for access logging.
    pub fn begin_task_phase(&self, t: usize) {
        self.phase.set(Some(t));
    }

    pub fn end_task_phase(&self) {
        self.phase.set(None);
    }

    /// Training bags of task `t`; the read is logged.
    pub fn train_bags(&self, t: usize) -> &[Bag] {
        self.log.borrow_mut().push(TrainAccess {
            processing_task: self.phase.get(),
            accessed_task: t,
        });
        &self.tasks[t].train
    }

    pub fn test_bags(&self, t: usize) -> &[Bag] {
        &self.tasks[t].test
    }

    pub fn access_log(&self) -> Vec<TrainAccess> {
        self.log.borrow().clone()
    }

    /// Reads of an earlier task's training bags while a later task was being
    /// processed.
    pub fn rehearsal_violations(&self) -> usize {
        self.log
            .borrow()
            .iter()
            .filter(|a| matches!(a.processing_task, Some(j) if a.accessed_task < j))
            .count()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.bank.save(dir.join("prompt_bank.msld"))?;
        for (idx, task) in self.tasks.iter().enumerate() {
            let file = File::create(dir.join(format!("task_{idx}.msbg")))?;
            let mut w = BufWriter::new(file);
            w.write_all(&BAG_MAGIC)?;
            w.write_all(&BAG_VERSION.to_le_bytes())?;
            w.write_all(&(task.name.len() as u32).to_le_bytes())?;
            w.write_all(task.name.as_bytes())?;
            w.write_all(&(task.train.len() as u32).to_le_bytes())?;
            w.write_all(&(task.test.len() as u32).to_le_bytes())?;
            for bag in task.train.iter().chain(&task.test) {
                write_bag(&mut w, bag)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Stream> {
        let dir = dir.as_ref();
        let bank = PromptBank::load(dir.join("prompt_bank.msld"))?;
        let mut tasks = Vec::new();
        for idx in 0..bank.num_tasks() {
            let file = File::open(dir.join(format!("task_{idx}.msbg")))?;
            let mut r = BufReader::new(file);
            let mut magic = [0u8; 4];
            read_exact(&mut r, &mut magic, "bag magic")?;
            if magic != BAG_MAGIC {
                return Err(Error::BadMagic {
                    expected: BAG_MAGIC,
                    found: magic,
                });
            }
            let version = read_u32(&mut r, "bag version")?;
            if version != BAG_VERSION {
                return Err(Error::UnsupportedVersion(version));
            }
            let name = read_string(&mut r, "task name")?;
            let train_count = read_u32(&mut r, "train count")? as usize;
            let test_count = read_u32(&mut r, "test count")? as usize;
            let mut train = Vec::with_capacity(train_count);
            for _ in 0..train_count {
                train.push(read_bag(&mut r)?);
            }
            let mut test = Vec::with_capacity(test_count);
            for _ in 0..test_count {
                test.push(read_bag(&mut r)?);
            }
            tasks.push(TaskData { name, train, test });
        }
        Ok(Stream::new(tasks, bank))
    }
}

fn write_bag(w: &mut impl Write, bag: &Bag) -> Result<()> {
    w.write_all(&(bag.label as u32).to_le_bytes())?;
    w.write_all(&(bag.task_id as u32).to_le_bytes())?;
    let site = bag.site_id.map(|s| s as i64).unwrap_or(-1);
    w.write_all(&site.to_le_bytes())?;
    w.write_all(&(bag.patches.rows() as u64).to_le_bytes())?;
    w.write_all(&(bag.patches.cols() as u64).to_le_bytes())?;
    for &x in bag.patches.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_bag(r: &mut impl Read) -> Result<Bag> {
    let label = read_u32(r, "bag label")? as usize;
    let task_id = read_u32(r, "bag task")? as usize;
    let mut site_buf = [0u8; 8];
    read_exact(r, &mut site_buf, "bag site")?;
    let site = i64::from_le_bytes(site_buf);
    let rows = read_u64(r, "bag rows")? as usize;
    let cols = read_u64(r, "bag cols")? as usize;
    let mut data = vec![0.0f64; rows * cols];
    for x in &mut data {
        let mut buf = [0u8; 8];
        read_exact(r, &mut buf, "bag data")?;
        *x = f64::from_le_bytes(buf);
    }
    Ok(Bag {
        patches: Matrix::from_vec(rows, cols, data),
        label,
        task_id,
        site_id: (site >= 0).then_some(site as usize),
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Truncated(what))
}

/// Generate bags and the prompt bank for every task. Prototypes come from
/// the synthetic bank; each bag mixes prototype-centered patches with
/// background noise, deterministically from the seeds.
pub fn gen_stream(config: &StreamConfig) -> Result<Stream> {
    config.validate()?;
    let bank_config = PromptBankConfig {
        tasks: config
            .tasks
            .iter()
            .map(|t| (t.name.clone(), t.classes.iter().map(|c| c.name.clone()).collect()))
            .collect(),
        d: config.d,
        rho_in: config.rho_in,
        rho_out: config.rho_out,
        rho_shared: config.rho_shared,
        normalize: config.normalize,
    };
    let bank = synth_prompt_bank(&bank_config, child_seed(config.stream_seed, &[config.fold, 0]))?;

    // Per-site shift vectors, shared by every bag of a site.
    let site_shifts: Vec<Vec<f64>> = (0..config.sites)
        .map(|s| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(child_seed(config.stream_seed, &[config.fold, 1, s as u64]));
            (0..config.d).map(|_| config.shift_std * gaussian(&mut rng)).collect()
        })
        .collect();

    let mut tasks = Vec::with_capacity(config.tasks.len());
    let mut bag_counter: u64 = 0;
    for (t, spec) in config.tasks.iter().enumerate() {
        let prompts = bank.task(t)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (c, class) in spec.classes.iter().enumerate() {
            let prototype = prompts.class_embeddings().row(c).to_vec();
            for (split, count, out) in [(2u64, class.train_bags, &mut train), (3u64, class.test_bags, &mut test)]
            {
                for b in 0..count {
                    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(
                        config.stream_seed,
                        &[config.fold, split, t as u64, c as u64, b as u64],
                    ));
                    let site = (config.sites > 0).then(|| (bag_counter as usize) % config.sites);
                    bag_counter += 1;
                    out.push(gen_bag(config, &prototype, t, c, site, &site_shifts, &mut rng));
                }
            }
        }
        tasks.push(TaskData {
            name: spec.name.clone(),
            train,
            test,
        });
    }
    Ok(Stream::new(tasks, bank))
}

fn gen_bag(
    config: &StreamConfig,
    prototype: &[f64],
    task_id: usize,
    label: usize,
    site: Option<usize>,
    site_shifts: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Bag {
    let n = rng.random_range(config.patches_min..=config.patches_max);
    let n_signal = ((config.signal_fraction * n as f64).round() as usize).min(n);
    let d = config.d;
    let mut patches = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let center = if i < n_signal { prototype[j] } else { 0.0 };
            patches.set(i, j, center + config.noise_std * gaussian(rng));
        }
    }
    if let Some(s) = site {
        let shift = &site_shifts[s];
        for i in 0..n {
            for j in 0..d {
                patches.set(i, j, patches.get(i, j) + shift[j]);
            }
        }
    }
    Bag {
        patches,
        label,
        task_id,
        site_id: site,
    }
}

/// Reorder the tasks of a stream. Bag contents and prompts are untouched;
/// task ids are renumbered to the new positions. The access log starts
/// fresh.
pub fn permute_tasks(stream: &Stream, order: &[usize]) -> Result<Stream> {
    check_permutation(order, stream.num_tasks())?;
    let bank = stream.bank().permuted(order)?;
    let renumber = |bags: &[Bag], new_id: usize| -> Vec<Bag> {
        bags.iter()
            .map(|b| Bag {
                patches: b.patches.clone(),
                label: b.label,
                task_id: new_id,
                site_id: b.site_id,
            })
            .collect()
    };
    let tasks = order
        .iter()
        .enumerate()
        .map(|(new_id, &old)| TaskData {
            name: stream.tasks[old].name.clone(),
            train: renumber(&stream.tasks[old].train, new_id),
            test: renumber(&stream.tasks[old].test, new_id),
        })
        .collect();
    Ok(Stream::new(tasks, bank))
}
