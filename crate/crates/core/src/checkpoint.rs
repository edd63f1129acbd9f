//! Per-head model archives that load without any objective or schedule.
//!
//! A checkpoint directory holds:
//! - `manifest.tsv`: `name<TAB>d0,d1,..<TAB>f32<TAB>byte_offset`, one line per parameter
//! - `params.bin`: the little-endian f32 values, concatenated in manifest order
//! - `config.txt`: `key=value` model and head configuration
//! - `vocab.txt`: one token per line, in id order

use std::fs;
use std::path::{Path, PathBuf};

use crate::batch::Batch;
use crate::data::{read_lines, write_lines, Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::lang_module::LangModule;
use crate::model::{bindings_of, Bindings, Head, HeadKind, ModelConfig, ModelParams, Transformer};
use crate::tensor::{Graph, ParamStore, Parameter, Tensor, Var};

pub const MANIFEST: &str = "manifest.tsv";
pub const BLOB: &str = "params.bin";
pub const CONFIG: &str = "config.txt";
pub const VOCAB: &str = "vocab.txt";

const DECODE_CHUNK: usize = 64;

/// A body plus one head, detached from any registry.
#[derive(Debug, Clone)]
pub struct StandaloneModel {
    model: Transformer,
    head: Head,
    store: ParamStore,
    bindings: Bindings,
    vocab: Vocab,
}

impl StandaloneModel {
    pub fn new(model: Transformer, head: Head, params: Vec<Parameter>, vocab: Vocab) -> Result<Self> {
        let store = ParamStore::from_params(params)?;
        let bindings = bindings_of(&store);
        model.check_head(&head, ModelParams::new(&store, &bindings))?;
        Ok(Self {
            model,
            head,
            store,
            bindings,
            vocab,
        })
    }

    /// Snapshot of what `objective_id` sees in `lm`.
    pub fn from_lang_module(lm: &LangModule, objective_id: &str, vocab: &Vocab) -> Result<Self> {
        let head = lm.head_for(objective_id)?.clone();
        Self::new(
            lm.model().clone(),
            head,
            lm.objective_parameters(objective_id)?,
            vocab.clone(),
        )
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn params(&self) -> ModelParams<'_, f32> {
        ModelParams::new(&self.store, &self.bindings)
    }

    /// All parameters in storage order: body first, then the head.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.store.iter().cloned().collect()
    }

    pub fn body_parameters(&self) -> Vec<Parameter> {
        self.store
            .iter()
            .filter(|p| p.name.starts_with("body."))
            .cloned()
            .collect()
    }

    pub fn head_parameters(&self) -> Vec<Parameter> {
        self.store
            .iter()
            .filter(|p| !p.name.starts_with("body."))
            .cloned()
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.model.forward(g, self.params(), &self.head, batch, None)
    }

    /// Greedy decode of already wrapped source ids.
    pub fn greedy_decode(&self, source: &[usize], max_len: usize) -> Result<Vec<usize>> {
        self.model.greedy_decode(self.params(), &self.head, source, max_len)
    }

    /// Text in, text out, through the vocabulary.
    pub fn translate_batch(&self, texts: &[&str]) -> Result<Vec<String>> {
        let max_len = self.model.config().max_len;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(DECODE_CHUNK) {
            let sources: Vec<Vec<usize>> = chunk
                .iter()
                .map(|t| {
                    let mut s = vec![BOS];
                    s.extend(self.vocab.tokenize(t));
                    s.push(EOS);
                    s
                })
                .collect();
            let decoded = self
                .model
                .greedy_decode_batch(self.params(), &self.head, &sources, max_len)?;
            out.extend(decoded.iter().map(|ids| self.vocab.detokenize(ids)));
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::with_capacity(self.store.len());
        let mut blob = Vec::with_capacity(self.store.numel() * 4);
        for p in self.store.iter() {
            let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
            manifest.push(format!("{}\t{}\tf32\t{}", p.name, dims.join(","), blob.len()));
            for v in p.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_lines(&dir.join(MANIFEST), &manifest)?;
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let c = self.model.config();
        let config = vec![
            format!("vocab_size={}", c.vocab_size),
            format!("d_model={}", c.d_model),
            format!("n_heads={}", c.n_heads),
            format!("enc_layers={}", c.enc_layers),
            format!("dec_layers={}", c.dec_layers),
            format!("ffn_dim={}", c.ffn_dim),
            format!("max_len={}", c.max_len),
            format!("dropout={}", c.dropout),
            format!("head.kind={}", self.head.kind),
            format!("head.n_outputs={}", self.head.n_outputs),
            format!("head.prefix={}", self.head.prefix),
        ];
        write_lines(&dir.join(CONFIG), &config)?;
        write_lines(&dir.join(VOCAB), self.vocab.tokens())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let corrupt = |path: PathBuf, detail: String| Error::Corruption { path, detail };
        let config_path = dir.join(CONFIG);
        let mut cfg = ModelConfig::new(0);
        let (mut kind, mut n_outputs, mut prefix) = (None, None, None);
        for line in read_lines(&config_path)? {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(config_path.clone(), format!("malformed line `{line}`")))?;
            let bad = || corrupt(config_path.clone(), format!("bad value for `{key}`: `{value}`"));
            let int = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "vocab_size" => cfg.vocab_size = int()?,
                "d_model" => cfg.d_model = int()?,
                "n_heads" => cfg.n_heads = int()?,
                "enc_layers" => cfg.enc_layers = int()?,
                "dec_layers" => cfg.dec_layers = int()?,
                "ffn_dim" => cfg.ffn_dim = int()?,
                "max_len" => cfg.max_len = int()?,
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad())?,
                "head.kind" => kind = Some(value.parse::<HeadKind>().map_err(|_| bad())?),
                "head.n_outputs" => n_outputs = Some(int()?),
                "head.prefix" => prefix = Some(value.to_string()),
                _ => return Err(corrupt(config_path.clone(), format!("unknown key `{key}`"))),
            }
        }
        let head = match (kind, n_outputs, prefix) {
            (Some(kind), Some(n_outputs), Some(prefix)) => Head {
                kind,
                n_outputs,
                prefix,
            },
            _ => return Err(corrupt(config_path, "missing head configuration".into())),
        };
        let model = Transformer::new(cfg)?;
        let vocab = Vocab::from_tokens(read_lines(&dir.join(VOCAB))?)
            .map_err(|e| corrupt(dir.join(VOCAB), e.to_string()))?;

        let manifest_path = dir.join(MANIFEST);
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut params = Vec::new();
        let mut expected_offset = 0usize;
        for line in read_lines(&manifest_path)? {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dims, dtype, offset] = fields.as_slice() else {
                return Err(corrupt(manifest_path, format!("malformed line `{line}`")));
            };
            if *dtype != "f32" {
                return Err(corrupt(manifest_path, format!("unsupported dtype `{dtype}`")));
            }
            let shape = dims
                .split(',')
                .filter(|d| !d.is_empty())
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt(manifest_path.clone(), format!("bad shape `{dims}`")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| corrupt(manifest_path.clone(), format!("bad offset `{offset}`")))?;
            if offset != expected_offset {
                return Err(corrupt(
                    manifest_path,
                    format!("`{name}` at byte {offset}, expected {expected_offset}"),
                ));
            }
            let bytes = shape.iter().product::<usize>() * 4;
            let end = offset + bytes;
            if end > blob.len() {
                return Err(corrupt(
                    blob_path,
                    format!("`{name}` needs bytes {offset}..{end} but blob has {}", blob.len()),
                ));
            }
            let data = blob[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push(Parameter::new(*name, Tensor::new(shape, data)?));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(corrupt(
                blob_path,
                format!("manifest covers {expected_offset} bytes, blob has {}", blob.len()),
            ));
        }
        Self::new(model, head, params, vocab).map_err(|e| match e {
            Error::Routing(d) | Error::Compatibility(d) => corrupt(dir.to_path_buf(), d),
            other => other,
        })
    }
}

/// Writes the body and `objective_id`'s head as a standalone archive.
pub fn save_head_checkpoint(
    lm: &LangModule,
    objective_id: &str,
    vocab: &Vocab,
    dir: impl AsRef<Path>,
) -> Result<()> {
    StandaloneModel::from_lang_module(lm, objective_id, vocab)?.save(dir)
}

pub fn load_head_checkpoint(dir: impl AsRef<Path>) -> Result<StandaloneModel> {
    StandaloneModel::load(dir)
}
