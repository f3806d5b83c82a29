//! Synthetic sequence tasks (copy, reverse, two-digit modular addition), a
//! greedy-decoding evaluator, and a teacher–student setup with a known
//! low-rank QKV update.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nanoformer::{Model, TokenBatch};
use crate::numkit::{Graph, Tensor};
use crate::trainkit::{Batch, BatchSource, Targets};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const VOCAB_SIZE: usize = 32;

const DIGIT0: usize = 3;
const PLUS: usize = 13;
const EQUALS: usize = 14;
const LETTER_A: usize = 15;
pub const N_LETTERS: usize = 17;

/// Character for a token id: `_` pad, `|` separator, `$` end, digits, `+`, `=`, `a`–`q`.
pub fn token_char(id: usize) -> Option<char> {
    match id {
        PAD => Some('_'),
        SEP => Some('|'),
        EOS => Some('$'),
        3..=12 => Some((b'0' + (id - DIGIT0) as u8) as char),
        PLUS => Some('+'),
        EQUALS => Some('='),
        15..=31 => Some((b'a' + (id - LETTER_A) as u8) as char),
        _ => None,
    }
}

pub fn char_token(c: char) -> Option<usize> {
    match c {
        '_' => Some(PAD),
        '|' => Some(SEP),
        '$' => Some(EOS),
        '0'..='9' => Some(DIGIT0 + (c as usize - '0' as usize)),
        '+' => Some(PLUS),
        '=' => Some(EQUALS),
        'a'..='q' => Some(LETTER_A + (c as usize - 'a' as usize)),
        _ => None,
    }
}

pub fn encode(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| char_token(c).ok_or_else(|| LabError::Data(format!("character {c:?} is not in the vocabulary"))))
        .collect()
}

pub fn decode(ids: &[usize]) -> String {
    ids.iter().map(|&i| token_char(i).unwrap_or('?')).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Modadd,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Modadd];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modadd => "modadd",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::Config(format!("unknown task kind {s:?} (copy, reverse, modadd)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    TokenAccuracy,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// Model prompt: input followed by the separator.
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = self.input.clone();
        p.push(SEP);
        p
    }

    /// Full training sequence: input, separator, target, end token.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt();
        s.extend_from_slice(&self.target);
        s.push(EOS);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqTaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Letter-string length range for copy and reverse; unused by modadd.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    pub max_len: usize,
    /// Copy and reverse strings use the first `letters` letters of `a`–`q`.
    #[serde(default = "default_letters")]
    pub letters: usize,
}

fn default_min_len() -> usize {
    1
}

fn default_letters() -> usize {
    N_LETTERS
}

impl SeqTaskSpec {
    pub fn new(kind: TaskKind, seed: u64, sizes: (usize, usize, usize), max_len: usize) -> Self {
        SeqTaskSpec {
            kind,
            seed,
            n_train: sizes.0,
            n_val: sizes.1,
            n_test: sizes.2,
            min_len: 1,
            max_len,
            letters: N_LETTERS,
        }
    }

    /// Longest full training sequence this task can produce.
    pub fn max_sequence_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 2 * self.max_len + 2,
            // "99+99=" | "98" $
            TaskKind::Modadd => 6 + 1 + 2 + 1,
        }
    }

    fn sample_space(&self) -> f64 {
        match self.kind {
            TaskKind::Modadd => 100.0 * 100.0,
            _ => (self.min_len..=self.max_len).map(|l| (self.letters as f64).powi(l as i32)).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn render_number(n: usize) -> Vec<usize> {
    n.to_string().bytes().map(|b| DIGIT0 + (b - b'0') as usize).collect()
}

fn example_for(kind: TaskKind, input: Vec<usize>) -> Example {
    let target = match kind {
        TaskKind::Copy => input.clone(),
        TaskKind::Reverse => input.iter().rev().copied().collect(),
        TaskKind::Modadd => {
            let plus = input.iter().position(|&t| t == PLUS).expect("modadd input has '+'");
            let number = |ds: &[usize]| ds.iter().fold(0, |acc, &d| acc * 10 + (d - DIGIT0));
            let a = number(&input[..plus]);
            let b = number(&input[plus + 1..input.len() - 1]);
            render_number((a + b) % 100)
        }
    };
    Example { input, target }
}

fn modadd_input(a: usize, b: usize) -> Vec<usize> {
    let mut v = render_number(a);
    v.push(PLUS);
    v.extend(render_number(b));
    v.push(EQUALS);
    v
}

/// Generates a dataset whose splits are disjoint by input.
///
/// Copy and reverse draw strings over the first `letters` letters with a
/// uniform length in `min_len..=max_len`; modadd draws `a, b` uniformly from `0..100`.
pub fn gen_seq_task(spec: &SeqTaskSpec) -> Result<TaskDataset> {
    if spec.kind != TaskKind::Modadd && (spec.min_len == 0 || spec.min_len > spec.max_len) {
        return Err(LabError::Config(format!(
            "string lengths must satisfy 1 <= min_len <= max_len, got {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.kind != TaskKind::Modadd && !(1..=N_LETTERS).contains(&spec.letters) {
        return Err(LabError::Config(format!("letters must lie in 1..={N_LETTERS}, got {}", spec.letters)));
    }
    let total = spec.n_train + spec.n_val + spec.n_test;
    if total as f64 > spec.sample_space() {
        return Err(LabError::Data(format!(
            "{} distinct {} examples requested but only {} exist",
            total,
            spec.kind,
            spec.sample_space()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs: Vec<Vec<usize>> = if spec.sample_space() <= 4.0 * total as f64 {
        // dense request: enumerate and shuffle
        let mut all = enumerate_inputs(spec);
        all.shuffle(&mut rng);
        all.truncate(total);
        all
    } else {
        let mut seen = HashSet::with_capacity(total);
        let mut out = Vec::with_capacity(total);
        while out.len() < total {
            let input = match spec.kind {
                TaskKind::Modadd => modadd_input(rng.random_range(0..100), rng.random_range(0..100)),
                _ => {
                    let len = rng.random_range(spec.min_len..=spec.max_len);
                    (0..len).map(|_| LETTER_A + rng.random_range(0..spec.letters)).collect()
                }
            };
            if seen.insert(input.clone()) {
                out.push(input);
            }
        }
        out
    };
    let mut examples = inputs.into_iter().map(|i| example_for(spec.kind, i));
    let mut take = |n: usize| (&mut examples).take(n).collect::<Vec<_>>();
    let train = take(spec.n_train);
    let val = take(spec.n_val);
    let test = take(spec.n_test);
    Ok(TaskDataset {
        name: format!("{}-{}", spec.kind, spec.seed),
        kind: spec.kind,
        metric: Metric::ExactMatch,
        train,
        val,
        test,
    })
}

fn enumerate_inputs(spec: &SeqTaskSpec) -> Vec<Vec<usize>> {
    match spec.kind {
        TaskKind::Modadd => (0..100)
            .flat_map(|a| (0..100).map(move |b| modadd_input(a, b)))
            .collect(),
        _ => {
            let mut out = Vec::new();
            for len in spec.min_len..=spec.max_len {
                let count = spec.letters.pow(len as u32);
                for mut code in 0..count {
                    let mut s = vec![0; len];
                    for slot in s.iter_mut().rev() {
                        *slot = LETTER_A + code % spec.letters;
                        code /= spec.letters;
                    }
                    out.push(s);
                }
            }
            out
        }
    }
}

/// Encodes examples as one padded teacher-forcing batch.
///
/// Position `t` predicts token `t + 1` of the full sequence; only target and
/// end-token predictions are scored.
pub fn encode_batch(examples: &[&Example]) -> Result<Batch> {
    if examples.is_empty() {
        return Err(LabError::Data("cannot encode an empty batch".into()));
    }
    let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.full_sequence()).collect();
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0) - 1;
    let mut rows = Vec::with_capacity(seqs.len());
    let mut ids = Vec::with_capacity(seqs.len() * width);
    let mut mask = Vec::with_capacity(seqs.len() * width);
    for (seq, ex) in seqs.iter().zip(examples) {
        let mut row = seq[..seq.len() - 1].to_vec();
        row.resize(width, PAD);
        rows.push(row);
        let first_scored = ex.input.len(); // the separator position predicts the first target token
        for t in 0..width {
            let scored = t >= first_scored && t + 1 < seq.len();
            ids.push(if t + 1 < seq.len() { seq[t + 1] } else { PAD });
            mask.push(scored);
        }
    }
    Ok(Batch {
        tokens: TokenBatch::from_rows(&rows)?,
        targets: Targets::Tokens { ids, mask },
    })
}

/// Training batches drawn uniformly (with replacement) from a pool of examples.
#[derive(Clone, Debug)]
pub struct ExampleSource {
    train: Vec<Example>,
    val: Vec<Example>,
    val_batch_size: usize,
}

impl ExampleSource {
    pub fn new(train: Vec<Example>, val: Vec<Example>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(LabError::Data("training and validation splits must be non-empty".into()));
        }
        Ok(ExampleSource {
            train,
            val,
            val_batch_size: 64,
        })
    }

    pub fn from_dataset(ds: &TaskDataset) -> Result<Self> {
        ExampleSource::new(ds.train.clone(), ds.val.clone())
    }

    /// Pools the splits of several datasets (a pretraining mixture).
    pub fn mixture(datasets: &[TaskDataset]) -> Result<Self> {
        let train = datasets.iter().flat_map(|d| d.train.iter().cloned()).collect();
        let val = datasets.iter().flat_map(|d| d.val.iter().cloned()).collect();
        ExampleSource::new(train, val)
    }
}

impl BatchSource for ExampleSource {
    fn train_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Batch> {
        let picks: Vec<&Example> = (0..batch_size)
            .map(|_| &self.train[rng.random_range(0..self.train.len())])
            .collect();
        encode_batch(&picks)
    }

    fn val_batches(&self) -> Result<Vec<Batch>> {
        self.val
            .chunks(self.val_batch_size)
            .map(|c| encode_batch(&c.iter().collect::<Vec<_>>()))
            .collect()
    }
}

/// Produces continuations for prompts.
pub trait Decoder {
    /// Generated tokens after each prompt, excluding the end token.
    fn continue_prompts(&self, prompts: &[Vec<usize>], max_new_tokens: usize) -> Result<Vec<Vec<usize>>>;
}

const DECODE_BATCH: usize = 64;

impl Decoder for Model {
    fn continue_prompts(&self, prompts: &[Vec<usize>], max_new_tokens: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(DECODE_BATCH) {
            for (p, full) in chunk.iter().zip(self.generate_batch(chunk, max_new_tokens, Some(EOS))?) {
                let mut tail = full[p.len()..].to_vec();
                if tail.last() == Some(&EOS) {
                    tail.pop();
                }
                out.push(tail);
            }
        }
        Ok(out)
    }
}

/// Greedy-decoding score on `examples`.
///
/// Exact match is the fraction of outputs equal to their target; token
/// accuracy is the fraction of target positions predicted correctly (pooled
/// over all examples). Prompts of equal length are decoded together.
pub fn evaluate(decoder: &dyn Decoder, examples: &[Example], metric: Metric, max_new_tokens: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(LabError::Data("cannot evaluate on an empty split".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.input.len()).or_default().push(e);
    }
    let (mut exact, mut hits, mut positions) = (0usize, 0usize, 0usize);
    for group in groups.values() {
        let prompts: Vec<Vec<usize>> = group.iter().map(|e| e.prompt()).collect();
        let outputs = decoder.continue_prompts(&prompts, max_new_tokens)?;
        for (e, out) in group.iter().zip(outputs) {
            exact += usize::from(out == e.target);
            hits += e.target.iter().zip(&out).filter(|(a, b)| a == b).count();
            positions += e.target.len();
        }
    }
    Ok(match metric {
        Metric::ExactMatch => exact as f64 / examples.len() as f64,
        Metric::TokenAccuracy => hits as f64 / positions as f64,
    })
}

/// One line per example: `input<TAB>target`, rendered as characters.
pub fn to_tsv(examples: &[Example]) -> String {
    examples
        .iter()
        .map(|e| format!("{}\t{}\n", decode(&e.input), decode(&e.target)))
        .collect()
}

pub fn from_tsv(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (input, target) = line
                .split_once('\t')
                .ok_or_else(|| LabError::Data(format!("line without a tab: {line:?}")))?;
            Ok(Example {
                input: encode(input)?,
                target: encode(target)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSpec {
    pub r_true: usize,
    pub seed: u64,
    /// The injected update `P·Q` per layer, `3d × d`.
    pub deltas: Vec<Tensor>,
}

/// A teacher equal to `base` except that each layer's QKV weight gains a
/// rank-`r_true` update `P·Q`, with `P` and `Q` entries drawn with standard
/// deviation `1/√(d·r_true)`.
pub fn make_teacher(base: &Model, r_true: usize, seed: u64) -> Result<(TeacherSpec, Model)> {
    let d = base.config.d;
    if r_true == 0 || r_true > d {
        return Err(LabError::Config(format!("r_true must lie in 1..={d}, got {r_true}")));
    }
    if base.adapter().is_some() {
        return Err(LabError::Contract("teacher base must not carry an adapter".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / ((d * r_true) as f64).sqrt();
    let mut teacher = base.clone();
    let mut deltas = Vec::with_capacity(base.config.layers);
    for layer in teacher.base.layers.iter_mut() {
        let p = Tensor::randn(&[3 * d, r_true], std, &mut rng);
        let q = Tensor::randn(&[r_true, d], std, &mut rng);
        let mut g = Graph::new();
        let (vp, vq) = (g.constant(p), g.constant(q));
        let pq = g.matmul(vp, vq)?;
        let delta = g.value(pq).clone();
        layer.qkv = layer.qkv.add(&delta)?;
        deltas.push(delta);
    }
    Ok((TeacherSpec { r_true, seed, deltas }, teacher))
}

fn check_pair(student: &Model, teacher: &Model) -> Result<()> {
    if student.config != teacher.config {
        return Err(LabError::Config(format!(
            "student geometry {:?} differs from teacher {:?}",
            student.config, teacher.config
        )));
    }
    Ok(())
}

/// Random probe sequences of length `seq` over the full vocabulary.
pub fn probe_tokens(vocab: usize, n: usize, seq: usize, seed: u64) -> Result<TokenBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..seq).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    TokenBatch::from_rows(&rows)
}

/// Mean squared error between student and teacher logits on `probe`.
pub fn distill_loss(student: &Model, teacher: &Model, probe: &TokenBatch) -> Result<Tensor> {
    check_pair(student, teacher)?;
    let s = student.forward(probe)?;
    let t = teacher.forward(probe)?;
    let mse = s
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / s.numel() as f64;
    Ok(Tensor::scalar(mse))
}

/// Distillation batches: fixed probe sequences labelled with teacher logits.
#[derive(Clone, Debug)]
pub struct DistillSource {
    train: Vec<(Vec<usize>, Tensor)>,
    val: Vec<Batch>,
}

impl DistillSource {
    pub fn new(student: &Model, teacher: &Model, n_train: usize, n_val: usize, seq: usize, seed: u64) -> Result<Self> {
        check_pair(student, teacher)?;
        let v = teacher.config.vocab_size;
        let label = |tokens: &TokenBatch| -> Result<Tensor> {
            teacher.forward(tokens)?.reshape(vec![tokens.batch * tokens.seq, v])
        };
        let train_tokens = probe_tokens(v, n_train, seq, seed)?;
        let train_logits = label(&train_tokens)?;
        let per_row = seq * v;
        let train = (0..n_train)
            .map(|b| {
                let logits = Tensor::matrix(seq, v, train_logits.data()[b * per_row..(b + 1) * per_row].to_vec())?;
                Ok((train_tokens.row(b).to_vec(), logits))
            })
            .collect::<Result<_>>()?;
        let val_tokens = probe_tokens(v, n_val, seq, seed ^ 0x5eed_0f_7a1)?;
        let val = vec![Batch {
            targets: Targets::Logits(label(&val_tokens)?),
            tokens: val_tokens,
        }];
        Ok(DistillSource { train, val })
    }
}

impl BatchSource for DistillSource {
    fn train_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Batch> {
        let picks: Vec<&(Vec<usize>, Tensor)> = (0..batch_size)
            .map(|_| &self.train[rng.random_range(0..self.train.len())])
            .collect();
        let rows: Vec<Vec<usize>> = picks.iter().map(|(r, _)| r.clone()).collect();
        let tokens = TokenBatch::from_rows(&rows)?;
        let cols = picks[0].1.cols();
        let data: Vec<f64> = picks.iter().flat_map(|(_, l)| l.data().iter().copied()).collect();
        Ok(Batch {
            targets: Targets::Logits(Tensor::matrix(tokens.batch * tokens.seq, cols, data)?),
            tokens,
        })
    }

    fn val_batches(&self) -> Result<Vec<Batch>> {
        Ok(self.val.clone())
    }
}
