//! Synthetic multi-task corpus with engineered conflict.
//!
//! All tasks draw inputs from the same distribution over digit tokens, so an
//! identical input demands different outputs depending on the task. Each
//! instance is `instruction ++ SEP ++ input ++ SEP ++ response`; the loss
//! mask covers exactly the response span, and routing sees only the prompt
//! (everything before the response).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Digits occupy token ids 0..=9.
pub const DIGITS: usize = 10;
/// Separator between instruction, input, and response.
pub const SEP: usize = 10;
/// First instruction token; task t uses id INSTR_BASE + t.
pub const INSTR_BASE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Copy,
    Reverse,
    IncrementMod10,
    SortAscending,
}

impl Transform {
    pub fn apply(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Transform::Copy => input.to_vec(),
            Transform::Reverse => input.iter().rev().copied().collect(),
            Transform::IncrementMod10 => input.iter().map(|d| (d + 1) % 10).collect(),
            Transform::SortAscending => {
                let mut out = input.to_vec();
                out.sort_unstable();
                out
            }
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Transform::Copy => "copy",
            Transform::Reverse => "reverse",
            Transform::IncrementMod10 => "increment-mod-10",
            Transform::SortAscending => "sort-ascending",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: usize,
    pub instruction: Vec<usize>,
    pub transform: Transform,
    pub input_len: (usize, usize),
    /// Sample inputs without digit repetition. Distinct digits maximize the
    /// disagreement between task outputs on a shared input.
    pub distinct_digits: bool,
}

impl TaskSpec {
    /// The default task family: four transforms over the shared digit
    /// distribution, each with a distinct two-token instruction.
    pub fn default_family(input_len: (usize, usize)) -> Vec<TaskSpec> {
        [
            Transform::Copy,
            Transform::Reverse,
            Transform::IncrementMod10,
            Transform::SortAscending,
        ]
        .into_iter()
        .enumerate()
        .map(|(id, transform)| TaskSpec {
            id,
            instruction: vec![INSTR_BASE + id, INSTR_BASE + id],
            transform,
            input_len,
            distinct_digits: false,
        })
        .collect()
    }
}

/// One training/eval instance. `instr_end` marks the end of the task
/// instruction prefix; `resp_start` marks the start of the response span.
/// The prompt (instruction + input, everything before `resp_start`) drives
/// routing; the response carries the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: usize,
    pub tokens: Vec<usize>,
    pub instr_end: usize,
    pub resp_start: usize,
}

impl TaskInstance {
    pub fn build(spec: &TaskSpec, input: &[usize]) -> Result<TaskInstance> {
        if input.is_empty() {
            return Err(Error::Input("instance input must be non-empty".into()));
        }
        let response = spec.transform.apply(input);
        let mut tokens = spec.instruction.clone();
        let instr_end = tokens.len();
        tokens.push(SEP);
        tokens.extend_from_slice(input);
        tokens.push(SEP);
        let resp_start = tokens.len();
        tokens.extend_from_slice(&response);
        let inst = TaskInstance {
            task: spec.id,
            tokens,
            instr_end,
            resp_start,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Structural invariants: spans disjoint, contiguous, covering; the
    /// instruction prefix and the response are non-empty.
    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        if self.instr_end == 0 || self.instr_end > len {
            return Err(Error::Input(format!(
                "instr_end {} out of range for {} tokens",
                self.instr_end, len
            )));
        }
        if self.resp_start < self.instr_end || self.resp_start >= len {
            return Err(Error::Input(format!(
                "resp_start {} out of range (instr_end {}, {} tokens)",
                self.resp_start, self.instr_end, len
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prompt span: everything before the response (instruction + input).
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.resp_start]
    }

    pub fn response(&self) -> &[usize] {
        &self.tokens[self.resp_start..]
    }

    /// Next-token targets and loss mask: position t predicts token t+1, and
    /// the mask selects exactly the positions whose target lies in the
    /// response span.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<bool>) {
        let len = self.tokens.len();
        let mut targets = vec![0usize; len];
        let mut mask = vec![false; len];
        for t in 0..len - 1 {
            targets[t] = self.tokens[t + 1];
            mask[t] = t + 1 >= self.resp_start;
        }
        (targets, mask)
    }
}

/// Serialize one instance as a JSONL line.
pub fn instance_to_line(inst: &TaskInstance) -> Result<String> {
    Ok(serde_json::to_string(inst)?)
}

/// Parse and validate one JSONL corpus line.
pub fn parse_instance_line(line: &str) -> Result<TaskInstance> {
    let inst: TaskInstance = serde_json::from_str(line)?;
    inst.validate()?;
    Ok(inst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(&self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[TaskInstance] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
}

fn check_disjoint_prefixes(specs: &[TaskSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        for b in specs.iter().skip(i + 1) {
            let head = a.instruction.len().min(b.instruction.len());
            if a.instruction[..head] == b.instruction[..head] {
                return Err(Error::Config(format!(
                    "instruction prefixes of tasks {} and {} overlap",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

fn gen_split(specs: &[TaskSpec], per_task: usize, rng: &mut Rng) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::with_capacity(specs.len() * per_task);
    for spec in specs {
        let (lo, hi) = spec.input_len;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!(
                "task {} has invalid input length range {lo}..={hi}",
                spec.id
            )));
        }
        if spec.distinct_digits && hi > DIGITS {
            return Err(Error::Config(format!(
                "task {} wants {hi} distinct digits but only {DIGITS} exist",
                spec.id
            )));
        }
        for _ in 0..per_task {
            let len = lo + rng.below(hi - lo + 1);
            let input: Vec<usize> = if spec.distinct_digits {
                let mut pool: Vec<usize> = (0..DIGITS).collect();
                rng.shuffle(&mut pool);
                pool.truncate(len);
                pool
            } else {
                (0..len).map(|_| rng.below(DIGITS)).collect()
            };
            out.push(TaskInstance::build(spec, &input)?);
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Generate balanced train/val/test splits, deterministic under the seed.
pub fn gen_corpus(specs: &[TaskSpec], sizes: SplitSizes, seed: u64) -> Result<Corpus> {
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two tasks, got {}",
            specs.len()
        )));
    }
    check_disjoint_prefixes(specs)?;
    let root = Rng::new(seed).split("corpus");
    Ok(Corpus {
        train: gen_split(specs, sizes.train_per_task, &mut root.split("train"))?,
        val: gen_split(specs, sizes.val_per_task, &mut root.split("val"))?,
        test: gen_split(specs, sizes.test_per_task, &mut root.split("test"))?,
    })
}

/// Write one split as UTF-8 JSONL, one instance per line.
pub fn write_jsonl(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        writeln!(w, "{}", instance_to_line(inst)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_instance_line(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: empty corpus", path.display())));
    }
    Ok(out)
}

/// Write all three splits into a directory.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(Split::Train.file_name()), &corpus.train)?;
    write_jsonl(&dir.join(Split::Val.file_name()), &corpus.val)?;
    write_jsonl(&dir.join(Split::Test.file_name()), &corpus.test)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<TaskSpec> {
        TaskSpec::default_family((3, 6))
    }

    #[test]
    fn transforms_match_definitions() {
        assert_eq!(Transform::Copy.apply(&[3, 1, 4]), vec![3, 1, 4]);
        assert_eq!(Transform::Reverse.apply(&[3, 1, 4]), vec![4, 1, 3]);
        assert_eq!(Transform::IncrementMod10.apply(&[9, 0]), vec![0, 1]);
        assert_eq!(Transform::SortAscending.apply(&[3, 1, 4]), vec![1, 3, 4]);
    }

    #[test]
    fn instance_layout_and_spans() {
        let spec = &specs()[1];
        let inst = TaskInstance::build(spec, &[3, 1, 4]).unwrap();
        // [13,13] ++ [SEP] ++ [3,1,4] ++ [SEP] ++ [4,1,3]
        assert_eq!(inst.tokens, vec![13, 13, SEP, 3, 1, 4, SEP, 4, 1, 3]);
        assert_eq!(inst.instr_end, 2);
        assert_eq!(inst.resp_start, 7);
        assert_eq!(inst.prompt(), &[13, 13, SEP, 3, 1, 4, SEP]);
        assert_eq!(inst.response(), &[4, 1, 3]);
    }

    #[test]
    fn mask_covers_exactly_response_targets() {
        let inst = TaskInstance::build(&specs()[0], &[5, 6]).unwrap();
        let (targets, mask) = inst.targets_and_mask();
        let len = inst.tokens.len();
        for t in 0..len - 1 {
            assert_eq!(mask[t], t + 1 >= inst.resp_start);
            if mask[t] {
                assert_eq!(targets[t], inst.tokens[t + 1]);
            }
        }
        assert!(!mask[len - 1]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), inst.response().len());
    }

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let sizes = SplitSizes {
            train_per_task: 20,
            val_per_task: 5,
            test_per_task: 5,
        };
        let a = gen_corpus(&specs(), sizes, 7).unwrap();
        let b = gen_corpus(&specs(), sizes, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);

        for task in 0..4 {
            assert_eq!(a.train.iter().filter(|i| i.task == task).count(), 20);
            assert_eq!(a.test.iter().filter(|i| i.task == task).count(), 5);
        }

        let c = gen_corpus(&specs(), sizes, 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn responses_obey_the_task_rule() {
        let sizes = SplitSizes {
            train_per_task: 10,
            val_per_task: 2,
            test_per_task: 2,
        };
        let corpus = gen_corpus(&specs(), sizes, 3).unwrap();
        let family = specs();
        for inst in &corpus.train {
            let input = &inst.tokens[inst.instr_end + 1..inst.resp_start - 1];
            let expect = family[inst.task].transform.apply(input);
            assert_eq!(inst.response(), expect.as_slice());
        }
    }

    #[test]
    fn overlapping_prefixes_rejected() {
        let mut family = specs();
        family[1].instruction = family[0].instruction.clone();
        let sizes = SplitSizes {
            train_per_task: 1,
            val_per_task: 1,
            test_per_task: 1,
        };
        assert!(matches!(
            gen_corpus(&family, sizes, 0),
            Err(Error::Config(_))
        ));
        // a strict prefix also counts as overlap
        let mut family2 = specs();
        family2[1].instruction = vec![family2[0].instruction[0]];
        assert!(matches!(
            gen_corpus(&family2, sizes, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let inst = TaskInstance::build(&specs()[2], &[9, 0]).unwrap();
        let line = instance_to_line(&inst).unwrap();
        // schema: {"task": int, "tokens": [int], "instr_end": int, "resp_start": int}
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(v.get("task").is_some());
        assert!(v.get("tokens").is_some());
        assert!(v.get("instr_end").is_some());
        assert!(v.get("resp_start").is_some());
        assert_eq!(parse_instance_line(&line).unwrap(), inst);
    }

    #[test]
    fn parser_rejects_malformed_spans() {
        assert!(parse_instance_line("not json").is_err());
        // resp_start beyond the end
        let bad = r#"{"task":0,"tokens":[1,2,3],"instr_end":1,"resp_start":3}"#;
        assert!(parse_instance_line(bad).is_err());
        // empty instruction
        let bad2 = r#"{"task":0,"tokens":[1,2,3],"instr_end":0,"resp_start":2}"#;
        assert!(parse_instance_line(bad2).is_err());
        // resp_start before instr_end
        let bad3 = r#"{"task":0,"tokens":[1,2,3,4],"instr_end":3,"resp_start":2}"#;
        assert!(parse_instance_line(bad3).is_err());
    }

    #[test]
    fn jsonl_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes {
            train_per_task: 3,
            val_per_task: 2,
            test_per_task: 2,
        };
        let corpus = gen_corpus(&specs(), sizes, 11).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let train = read_jsonl(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(train, corpus.train);

        // byte-identical across two writes of the same corpus
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_jsonl(&p1, &corpus.train).unwrap();
        write_jsonl(&p2, &corpus.train).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
