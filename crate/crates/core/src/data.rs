//! Synthetic sequence-to-sequence tasks and corpus files.
//!
//! All tasks share one vocabulary: the four reserved tokens, then one
//! contiguous range of `vocab_size` content tokens per language, then the
//! language tags (multilingual kinds only).

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// One source/target example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyTranslation,
    OneToMany,
    ManyToOne,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => Self::Copy,
            "reverse" => Self::Reverse,
            "toy_translation" => Self::ToyTranslation,
            "one_to_many" => Self::OneToMany,
            "many_to_one" => Self::ManyToOne,
            other => return Err(Error::Config(format!("unknown task kind {other:?}"))),
        })
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::ToyTranslation => "toy_translation",
            Self::OneToMany => "one_to_many",
            Self::ManyToOne => "many_to_one",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Content tokens per language.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Sub-languages for the multilingual kinds (ignored otherwise).
    pub languages: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::ToyTranslation,
            vocab_size: 128,
            min_len: 5,
            max_len: 24,
            n_train: 10_000,
            n_valid: 500,
            n_test: 500,
            languages: 2,
            seed: 0,
        }
    }
}

const FIRST: usize = 4;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "need max_len ≥ min_len ≥ 1, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.is_multilingual() && self.languages < 2 {
            return Err(Error::Config(
                "multilingual tasks need at least 2 languages".into(),
            ));
        }
        Ok(())
    }

    pub fn is_multilingual(&self) -> bool {
        matches!(self.kind, TaskKind::OneToMany | TaskKind::ManyToOne)
    }

    /// Number of content-token ranges in the shared vocabulary.
    fn ranges(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 1,
            TaskKind::ToyTranslation => 2,
            TaskKind::OneToMany | TaskKind::ManyToOne => 1 + self.languages,
        }
    }

    fn range(&self, r: usize) -> Range<usize> {
        let start = FIRST + r * self.vocab_size;
        start..start + self.vocab_size
    }

    /// Id of the tag selecting target language `lang` (one_to_many only).
    pub fn tag_token(&self, lang: usize) -> usize {
        FIRST + self.ranges() * self.vocab_size + lang
    }

    /// Total size of the shared vocabulary.
    pub fn total_vocab(&self) -> usize {
        let tags = if self.kind == TaskKind::OneToMany {
            self.languages
        } else {
            0
        };
        FIRST + self.ranges() * self.vocab_size + tags
    }

    /// Token range of sub-language `lang`: the target side for
    /// one_to_many, the source side for many_to_one.
    pub fn language_range(&self, lang: usize) -> Range<usize> {
        match self.kind {
            TaskKind::OneToMany => self.range(1 + lang),
            TaskKind::ManyToOne => self.range(lang),
            _ => self.range(self.ranges() - 1),
        }
    }

    /// Target language requested by a one_to_many source (its leading tag).
    pub fn target_language(&self, src: &[usize]) -> Option<usize> {
        if self.kind != TaskKind::OneToMany {
            return None;
        }
        let first_tag = self.tag_token(0);
        let tok = *src.first()?;
        (first_tag..first_tag + self.languages)
            .contains(&tok)
            .then(|| tok - first_tag)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut symbols = Vec::with_capacity(self.total_vocab() - FIRST);
        for r in 0..self.ranges() {
            for i in 0..self.vocab_size {
                symbols.push(format!("w{r}_{i}"));
            }
        }
        if self.kind == TaskKind::OneToMany {
            for l in 0..self.languages {
                symbols.push(format!("<2l{l}>"));
            }
        }
        Vocabulary::new(symbols)
    }

    /// Seeded permutation of `[0, vocab_size)` for range `which`.
    fn substitution(&self, which: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.vocab_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5B, which]));
        perm.shuffle(&mut rng);
        perm
    }

    /// Substitute through `map` into range `r`, then swap adjacent pairs at even indices.
    fn translate(&self, base: &[usize], map: &[usize], r: usize) -> Vec<usize> {
        let off = self.range(r).start;
        let mut out: Vec<usize> = base.iter().map(|&b| off + map[b]).collect();
        for k in (0..out.len().saturating_sub(1)).step_by(2) {
            out.swap(k, k + 1);
        }
        out
    }

    fn make_pair(&self, base: &[usize], lang: usize, maps: &[Vec<usize>]) -> SeqPair {
        let plain = |r: usize| -> Vec<usize> {
            let off = self.range(r).start;
            base.iter().map(|&b| off + b).collect()
        };
        match self.kind {
            TaskKind::Copy => {
                let s = plain(0);
                SeqPair {
                    tgt: s.clone(),
                    src: s,
                }
            }
            TaskKind::Reverse => {
                let s = plain(0);
                let mut t = s.clone();
                t.reverse();
                SeqPair { src: s, tgt: t }
            }
            TaskKind::ToyTranslation => SeqPair {
                src: plain(0),
                tgt: self.translate(base, &maps[0], 1),
            },
            TaskKind::OneToMany => {
                let mut src = vec![self.tag_token(lang)];
                src.extend(plain(0));
                SeqPair {
                    src,
                    tgt: self.translate(base, &maps[lang], 1 + lang),
                }
            }
            TaskKind::ManyToOne => {
                let off = self.range(lang).start;
                SeqPair {
                    src: base.iter().map(|&b| off + maps[lang][b]).collect(),
                    tgt: self.translate(base, &maps[self.languages], self.languages),
                }
            }
        }
    }

    /// Generates the three splits. Duplicate sources (within or across
    /// splits) are rejected and redrawn.
    pub fn generate(&self) -> Result<GeneratedCorpus> {
        self.validate()?;
        let n_maps = if self.is_multilingual() {
            self.languages + 1
        } else {
            1
        };
        let maps: Vec<Vec<usize>> = (0..n_maps as u64).map(|m| self.substitution(m)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0xC0]));
        let total = self.n_train + self.n_valid + self.n_test;
        let max_attempts = 100 * total.max(1) as u64;
        let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
        let mut pairs = Vec::with_capacity(total);
        let mut attempts = 0u64;
        while pairs.len() < total {
            if attempts >= max_attempts {
                return Err(Error::Config(format!(
                    "could only draw {} distinct sentences out of {total}; task space too small",
                    pairs.len()
                )));
            }
            attempts += 1;
            let n = rng.random_range(self.min_len..=self.max_len);
            let base: Vec<usize> = (0..n)
                .map(|_| rng.random_range(0..self.vocab_size))
                .collect();
            let lang = if self.is_multilingual() {
                rng.random_range(0..self.languages)
            } else {
                0
            };
            let pair = self.make_pair(&base, lang, &maps);
            if seen.insert(pair.src.clone()) {
                pairs.push(pair);
            }
        }
        let test = pairs.split_off(self.n_train + self.n_valid);
        let valid = pairs.split_off(self.n_train);
        Ok(GeneratedCorpus {
            train: pairs,
            valid,
            test,
            collision_rate: (attempts - total as u64) as f64 / attempts.max(1) as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub train: Vec<SeqPair>,
    pub valid: Vec<SeqPair>,
    pub test: Vec<SeqPair>,
    /// Fraction of draws rejected as duplicates.
    pub collision_rate: f64,
}

/// Fraction of hypotheses whose plurality language matches the one
/// requested by the corresponding source's tag. Ties and empty hypotheses
/// count as wrong.
pub fn language_accuracy(
    hypotheses: &[Vec<usize>],
    sources: &[Vec<usize>],
    spec: &TaskSpec,
) -> Result<f64> {
    if hypotheses.len() != sources.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} sources",
            hypotheses.len(),
            sources.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Undefined("language accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for (hyp, src) in hypotheses.iter().zip(sources) {
        let want = spec
            .target_language(src)
            .ok_or_else(|| Error::Input("source without a language tag".into()))?;
        let counts: Vec<usize> = (0..spec.languages)
            .map(|l| {
                let r = spec.language_range(l);
                hyp.iter().filter(|t| r.contains(t)).count()
            })
            .collect();
        let best = *counts.iter().max().unwrap_or(&0);
        if best > 0 && counts[want] == best && counts.iter().filter(|&&c| c == best).count() == 1 {
            correct += 1;
        }
    }
    Ok(correct as f64 / hypotheses.len() as f64)
}

/// Writes one JSON object per line: `{"src":[..],"tgt":[..]}`.
pub fn write_pairs(path: &Path, pairs: &[SeqPair]) -> Result<()> {
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p).expect("pairs serialise");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a corpus file; empty targets are rejected.
pub fn read_pairs(path: &Path) -> Result<Vec<SeqPair>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: SeqPair = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if p.tgt.is_empty() || p.src.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: empty sequence", i + 1),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Reads whitespace-separated token ids, one sequence per line.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|w| {
                    w.parse::<usize>().map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        message: format!("line {}: {e}", i + 1),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn write_token_lines(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in seqs {
        let line: Vec<String> = s.iter().map(usize::to_string).collect();
        writeln!(f, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: TaskSpec,
    pub vocab_size: usize,
    pub collision_rate: f64,
    /// `(file name, sha256)` in a fixed order.
    pub checksums: Vec<(String, String)>,
}

/// Paths of a corpus directory's files.
#[derive(Clone, Debug)]
pub struct CorpusPaths {
    pub dir: PathBuf,
}

impl CorpusPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
}

/// Generates a corpus and writes splits, vocabulary and checksum manifest.
pub fn generate_dataset(spec: &TaskSpec, dir: &Path) -> Result<CorpusManifest> {
    let corpus = spec.generate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CorpusPaths::new(dir);
    let vocab = spec.vocabulary()?;
    let vocab_path = paths.vocab();
    fs::write(&vocab_path, vocab.tokens().join("\n") + "\n")
        .map_err(|e| Error::io(&vocab_path, e))?;
    let mut checksums = Vec::new();
    for (name, pairs) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        let p = paths.split(name);
        write_pairs(&p, pairs)?;
        checksums.push((format!("{name}.jsonl"), sha256_file(&p)?));
    }
    checksums.push(("vocab.txt".into(), sha256_file(&vocab_path)?));
    let manifest = CorpusManifest {
        spec: spec.clone(),
        vocab_size: vocab.len(),
        collision_rate: corpus.collision_rate,
        checksums,
    };
    let mp = paths.manifest();
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let p = CorpusPaths::new(dir).manifest();
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p,
        message: e.to_string(),
    })
}
