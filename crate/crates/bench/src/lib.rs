//! Benchmark fixtures: a default-size model with one seq2seq head and a
//! deterministic teacher-forced batch.

use adaptorx_core::batch::{Batch, EncodedExample, LabelRow};
use adaptorx_core::data::{BOS, EOS};
use adaptorx_core::model::{bindings_of, Bindings, Head, HeadKind, ModelConfig, ModelParams, Transformer};
use adaptorx_core::rng::RngStreams;
use adaptorx_core::tensor::ParamStore;

pub const VOCAB: usize = 68;

pub struct Fixture {
    pub model: Transformer,
    pub head: Head,
    pub store: ParamStore,
    pub bindings: Bindings,
    pub batch: Batch,
}

impl Fixture {
    /// `batch_size` rows with sources and targets of `len` tokens.
    pub fn new(batch_size: usize, len: usize) -> Self {
        let model = Transformer::new(ModelConfig::new(VOCAB)).expect("default config is valid");
        let head = Head {
            kind: HeadKind::Seq2SeqLm,
            n_outputs: VOCAB,
            prefix: "head.bench".into(),
        };
        let streams = RngStreams::new(0);
        let mut params = model.init_body(&mut streams.stream("init/body"));
        params.extend(model.init_head(&head, &mut streams.stream("init/head")));
        let store = ParamStore::from_params(params).expect("unique names");
        let bindings = bindings_of(&store);
        let rows: Vec<EncodedExample> = (0..batch_size)
            .map(|r| {
                let tokens: Vec<usize> = (0..len).map(|i| 4 + (r * 7 + i * 3) % (VOCAB - 4)).collect();
                let mut source = vec![BOS];
                source.extend(&tokens);
                source.push(EOS);
                let mut dec = vec![BOS];
                dec.extend(tokens.iter().rev());
                let mut labels: Vec<usize> = tokens.iter().rev().copied().collect();
                labels.push(EOS);
                EncodedExample {
                    source,
                    decoder_input: Some(dec),
                    labels: LabelRow::Tokens(labels),
                    raw_ref: String::new(),
                }
            })
            .collect();
        let batch = Batch::collate("bench", &rows).expect("non-empty batch");
        Self {
            model,
            head,
            store,
            bindings,
            batch,
        }
    }

    pub fn params(&self) -> ModelParams<'_, f32> {
        ModelParams::new(&self.store, &self.bindings)
    }
}
