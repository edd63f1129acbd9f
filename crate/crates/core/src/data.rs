//! Raw-text ingestion, the whitespace tokenizer and the synthetic
//! multi-domain translation corpora.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStreams;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id bijection with the four specials at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from whitespace-tokenized lines. Tokens follow the
    /// specials ordered by descending frequency, ties broken lexicographically.
    pub fn build<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("specials lead and tokens are unique")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Input(
                "vocabulary must start with <pad> <s> </s> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, dropping `<pad>`, `<s>` and `</s>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lines held in memory or read from a UTF-8 file, one example per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineSource {
    InMemory(Vec<String>),
    Path(PathBuf),
}

impl LineSource {
    pub fn load(&self) -> Result<Vec<String>> {
        match self {
            LineSource::InMemory(lines) => Ok(lines.clone()),
            LineSource::Path(path) => read_lines(path),
        }
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Line-aligned texts and labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextPairSource {
    texts: Vec<String>,
    labels: Vec<String>,
}

impl TextPairSource {
    pub fn new(texts: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if texts.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} texts but {} labels",
                texts.len(),
                labels.len()
            )));
        }
        Ok(Self { texts, labels })
    }

    /// Unlabeled text; each line is its own label.
    pub fn monolingual(texts: Vec<String>) -> Self {
        Self {
            labels: texts.clone(),
            texts,
        }
    }

    pub fn from_sources(texts: &LineSource, labels: &LineSource) -> Result<Self> {
        Self::new(texts.load()?, labels.load()?)
    }

    pub fn from_paths(texts: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_lines(texts.as_ref())?, read_lines(labels.as_ref())?)
    }

    pub fn write(&self, texts: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        write_lines(texts.as_ref(), &self.texts)?;
        write_lines(labels.as_ref(), &self.labels)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&str, &str) {
        (&self.texts[i], &self.labels[i])
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomainId {
    Id,
    Ad,
    Ood,
}

impl DomainId {
    pub const ALL: [DomainId; 3] = [DomainId::Id, DomainId::Ad, DomainId::Ood];

    pub fn as_str(&self) -> &'static str {
        match self {
            DomainId::Id => "ID",
            DomainId::Ad => "AD",
            DomainId::Ood => "OOD",
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ID" | "id" => Ok(DomainId::Id),
            "AD" | "ad" => Ok(DomainId::Ad),
            "OOD" | "ood" => Ok(DomainId::Ood),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    ReverseOrder,
    Identity,
}

/// Surface form of synthetic token `i`: `t00`, `t01`, ...
pub fn token_name(i: usize) -> String {
    format!("t{i:02}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomainSpec {
    pub domain: DomainId,
    /// Token indices drawn for sources, e.g. `0..40` is `t00..t39`.
    pub vocab: Range<usize>,
    /// Explicit substitution: `cipher[k]` is the image of `vocab.start + k`.
    /// Generated at random when absent.
    pub cipher: Option<Vec<usize>>,
    pub transform: Transform,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl SyntheticDomainSpec {
    fn base(domain: DomainId, vocab: Range<usize>, transform: Transform) -> Self {
        Self {
            domain,
            vocab,
            cipher: None,
            transform,
            min_len: 4,
            max_len: 12,
            train_size: 2000,
            val_size: 200,
        }
    }

    pub fn in_domain() -> Self {
        Self::base(DomainId::Id, 0..40, Transform::ReverseOrder)
    }

    pub fn adapted_domain() -> Self {
        Self::base(DomainId::Ad, 24..64, Transform::Identity)
    }

    pub fn out_of_domain() -> Self {
        Self::base(DomainId::Ood, 0..64, Transform::ReverseOrder)
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::in_domain(), Self::adapted_domain(), Self::out_of_domain()]
    }
}

/// Bijective token substitution over a domain's token subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: BTreeMap<usize, usize>,
    inverse: BTreeMap<usize, usize>,
}

impl Cipher {
    pub fn new(domain: &Range<usize>, images: &[usize]) -> Result<Self> {
        if images.len() != domain.len() {
            return Err(Error::Spec(format!(
                "cipher has {} images for {} tokens",
                images.len(),
                domain.len()
            )));
        }
        let forward: BTreeMap<usize, usize> = domain.clone().zip(images.iter().copied()).collect();
        let mut inverse = BTreeMap::new();
        for (&k, &v) in &forward {
            if !domain.contains(&v) || inverse.insert(v, k).is_some() {
                return Err(Error::Spec(format!(
                    "cipher is not a bijection on t{:02}..t{:02}",
                    domain.start,
                    domain.end.saturating_sub(1)
                )));
            }
        }
        Ok(Self { forward, inverse })
    }

    pub fn apply(&self, token: usize) -> usize {
        self.forward.get(&token).copied().unwrap_or(token)
    }

    pub fn invert(&self, token: usize) -> usize {
        self.inverse.get(&token).copied().unwrap_or(token)
    }

    pub fn image(&self, token: usize) -> Option<usize> {
        self.forward.get(&token).copied()
    }
}

#[derive(Debug, Clone)]
pub struct DomainCorpus {
    pub spec: SyntheticDomainSpec,
    pub cipher: Cipher,
    pub train: TextPairSource,
    pub val: TextPairSource,
}

impl DomainCorpus {
    /// The exact source→target mapping of this domain.
    pub fn translate(&self, source: &str) -> String {
        let mut toks: Vec<usize> = parse_tokens(source)
            .into_iter()
            .map(|t| self.cipher.apply(t))
            .collect();
        if self.spec.transform == Transform::ReverseOrder {
            toks.reverse();
        }
        render_tokens(&toks)
    }

    /// Inverse mapping: recovers a source from its target.
    pub fn oracle_reverse(&self, target: &str) -> String {
        let mut toks: Vec<usize> = parse_tokens(target)
            .into_iter()
            .map(|t| self.cipher.invert(t))
            .collect();
        if self.spec.transform == Transform::ReverseOrder {
            toks.reverse();
        }
        render_tokens(&toks)
    }
}

fn parse_tokens(text: &str) -> Vec<usize> {
    text.split_whitespace()
        .filter_map(|t| t.strip_prefix('t').and_then(|n| n.parse().ok()))
        .collect()
}

fn render_tokens(toks: &[usize]) -> String {
    toks.iter()
        .map(|&t| token_name(t))
        .collect::<Vec<_>>()
        .join(" ")
}

const CIPHER_ATTEMPTS: usize = 10_000;

/// Generates train/val corpora for every spec, deterministically from
/// `master_seed`.
///
/// Random ciphers are drawn so that they disagree with every previously
/// generated cipher on all shared tokens, which makes the domains conflict
/// wherever their vocabularies overlap.
pub fn generate_synthetic_domains(
    master_seed: u64,
    specs: &[SyntheticDomainSpec],
) -> Result<BTreeMap<DomainId, DomainCorpus>> {
    let streams = RngStreams::new(master_seed);
    let mut out: BTreeMap<DomainId, DomainCorpus> = BTreeMap::new();
    for spec in specs {
        if spec.vocab.is_empty() || spec.min_len == 0 || spec.min_len > spec.max_len {
            return Err(Error::Spec(format!("invalid ranges for domain {}", spec.domain)));
        }
        if out.contains_key(&spec.domain) {
            return Err(Error::Spec(format!("domain {} declared twice", spec.domain)));
        }
        let cipher = match &spec.cipher {
            Some(images) => Cipher::new(&spec.vocab, images)?,
            None => {
                let mut rng = streams.stream(&format!("data/cipher/{}", spec.domain));
                let earlier: Vec<&Cipher> = out.values().map(|c| &c.cipher).collect();
                let mut images: Vec<usize> = spec.vocab.clone().collect();
                let mut found = None;
                for _ in 0..CIPHER_ATTEMPTS {
                    images.shuffle(&mut rng);
                    let clash = spec.vocab.clone().zip(&images).any(|(tok, &img)| {
                        earlier.iter().any(|c| c.image(tok) == Some(img))
                    });
                    if !clash {
                        found = Some(Cipher::new(&spec.vocab, &images)?);
                        break;
                    }
                }
                found.ok_or_else(|| {
                    Error::Spec(format!(
                        "no cipher for {} disagrees with earlier domains",
                        spec.domain
                    ))
                })?
            }
        };
        let mut corpus = DomainCorpus {
            spec: spec.clone(),
            cipher,
            train: TextPairSource::default(),
            val: TextPairSource::default(),
        };

        let mut rng = streams.stream(&format!("data/{}/lines", spec.domain));
        let sample = |rng: &mut crate::rng::StreamRng| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let toks: Vec<usize> = (0..len)
                .map(|_| rng.random_range(spec.vocab.clone()))
                .collect();
            render_tokens(&toks)
        };
        let train_src: Vec<String> = (0..spec.train_size).map(|_| sample(&mut rng)).collect();
        let mut seen: HashSet<String> = train_src.iter().cloned().collect();
        let mut val_src = Vec::with_capacity(spec.val_size);
        let mut attempts = 0usize;
        while val_src.len() < spec.val_size {
            attempts += 1;
            if attempts > 1000 * spec.val_size.max(1) {
                return Err(Error::Spec(format!(
                    "cannot draw {} unseen validation lines for {}",
                    spec.val_size, spec.domain
                )));
            }
            let s = sample(&mut rng);
            if seen.insert(s.clone()) {
                val_src.push(s);
            }
        }
        let targets = |src: &[String]| src.iter().map(|s| corpus.translate(s)).collect();
        let train_tgt = targets(&train_src);
        let val_tgt = targets(&val_src);
        corpus.train = TextPairSource::new(train_src, train_tgt)?;
        corpus.val = TextPairSource::new(val_src, val_tgt)?;
        out.insert(spec.domain, corpus);
    }
    Ok(out)
}
