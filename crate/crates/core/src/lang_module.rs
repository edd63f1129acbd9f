//! Shared-parameter registry: one body, one head per objective.
//!
//! Objective-specific modules are merged into a single storage. A parameter
//! of an incoming module is replaced by the stored one when name, shape and
//! every value bit agree; otherwise it is kept as a separate, objective-owned
//! copy. Randomly initialized heads therefore stay distinct while a body
//! shared by value is stored once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Bindings, Head, HeadKind, ModelParams, Transformer};
use crate::objectives::Objective;
use crate::rng::RngStreams;
use crate::tensor::{ParamId, ParamStore, Parameter};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Owner {
    Shared,
    Objective(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    /// Incoming names now referring to an existing stored parameter.
    pub shared_names: Vec<String>,
    /// Incoming names backed by storage owned by the merging objective.
    pub distinct_names: Vec<String>,
    /// Same name and shape as a stored parameter but different values.
    pub value_conflicts: Vec<String>,
    /// Same name as a stored parameter but a different shape.
    pub shape_warnings: Vec<String>,
    /// Elements in the base (excluding this objective's own storage) plus
    /// the incoming module.
    pub before_count: usize,
    /// Elements in the base plus the storage left to this objective.
    pub after_count: usize,
}

/// What an objective asks the registry for.
#[derive(Debug, Clone)]
pub struct HeadRequest {
    pub objective_id: String,
    pub kind: HeadKind,
    /// Output size of a fresh head; ignored when `module` is given.
    pub n_outputs: usize,
    /// Explicit module (body and/or head parameters) to merge instead of
    /// constructing a fresh head.
    pub module: Option<Vec<Parameter>>,
}

#[derive(Debug, Clone)]
struct Registration {
    head: Head,
    bindings: Bindings,
}

#[derive(Debug, Clone)]
pub struct LangModule {
    model: Transformer,
    streams: RngStreams,
    store: ParamStore,
    body: Bindings,
    heads: BTreeMap<String, Registration>,
    order: Vec<String>,
    sharing: BTreeMap<String, Owner>,
}

impl LangModule {
    /// Registry over a freshly initialized body.
    pub fn new(model: Transformer, seed: u64) -> Result<Self> {
        let streams = RngStreams::new(seed);
        let body = model.init_body(&mut streams.stream("init/body"));
        Self::with_body(model, body, seed)
    }

    /// Registry over given body parameters (e.g. from a checkpoint).
    pub fn with_body(model: Transformer, body: Vec<Parameter>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut bindings = Bindings::new();
        let mut sharing = BTreeMap::new();
        for p in body {
            if !p.name.starts_with("body.") {
                return Err(Error::Registration(format!(
                    "body parameter `{}` must be named body.*",
                    p.name
                )));
            }
            let name = p.name.clone();
            let id = store.insert(p)?;
            bindings.insert(name.clone(), id);
            sharing.insert(name, Owner::Shared);
        }
        Ok(Self {
            model,
            streams: RngStreams::new(seed),
            store,
            body: bindings,
            heads: BTreeMap::new(),
            order: Vec::new(),
            sharing,
        })
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sharing(&self) -> &BTreeMap<String, Owner> {
        &self.sharing
    }

    pub fn objective_ids(&self) -> &[String] {
        &self.order
    }

    /// Body parameter names in storage order.
    pub fn body_names(&self) -> Vec<String> {
        let mut names: Vec<(ParamId, &String)> = self.body.iter().map(|(n, &i)| (i, n)).collect();
        names.sort();
        names.into_iter().map(|(_, n)| n.clone()).collect()
    }

    pub fn body_param_count(&self) -> usize {
        self.body
            .values()
            .map(|&id| self.store.get(id).tensor.numel())
            .sum()
    }

    /// Merges `incoming` into storage on behalf of objective `scope` and
    /// returns the report plus the canonical-name → slot bindings of the
    /// incoming parameters.
    pub fn merge_shared_parameters(
        &mut self,
        scope: &str,
        incoming: Vec<Parameter>,
    ) -> Result<(MergeReport, Bindings)> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = incoming.iter().find(|p| !seen.insert(p.name.as_str())) {
            return Err(Error::Registration(format!(
                "incoming module repeats parameter `{}`",
                dup.name
            )));
        }
        let own = Owner::Objective(scope.to_string());
        let base_count: usize = self
            .store
            .iter()
            .filter(|p| self.sharing.get(&p.name) != Some(&own))
            .map(|p| p.tensor.numel())
            .sum();
        let mut report = MergeReport {
            before_count: base_count + incoming.iter().map(|p| p.tensor.numel()).sum::<usize>(),
            ..MergeReport::default()
        };
        let mut bindings = Bindings::new();
        let mut distinct_count = 0;
        for param in incoming {
            let name = param.name.clone();
            let numel = param.tensor.numel();
            if let Some(id) = self.store.id(&name) {
                let owner = self.sharing.get(&name).cloned().unwrap_or(Owner::Shared);
                let stored = &self.store.get(id).tensor;
                if owner != own && stored.bit_eq(&param.tensor) {
                    if let Owner::Objective(_) = owner {
                        self.sharing.insert(name.clone(), Owner::Shared);
                    }
                    bindings.insert(name.clone(), id);
                    report.shared_names.push(name);
                    continue;
                }
                if owner != own {
                    if stored.shape() == param.tensor.shape() {
                        report.value_conflicts.push(name.clone());
                    } else {
                        report.shape_warnings.push(name.clone());
                    }
                }
            }
            let slot = self.store_owned(scope, param)?;
            bindings.insert(name.clone(), slot);
            report.distinct_names.push(name);
            distinct_count += numel;
        }
        report.after_count = base_count + distinct_count;
        Ok((report, bindings))
    }

    /// Stores `param` as owned by `scope`, under its own name when free (or
    /// already ours) and under `head.<scope>.<name>` otherwise.
    fn store_owned(&mut self, scope: &str, mut param: Parameter) -> Result<ParamId> {
        let own = Owner::Objective(scope.to_string());
        let scoped = format!("head.{scope}.");
        let candidates = [param.name.clone(), format!("{scoped}{}", param.name)];
        for name in candidates {
            match self.store.id(&name) {
                Some(id) if self.sharing.get(&name) == Some(&own) => {
                    let slot = &mut self.store.get_mut(id).tensor;
                    if !slot.bit_eq(&param.tensor) {
                        *slot = param.tensor.with_grad();
                    }
                    return Ok(id);
                }
                Some(_) => continue,
                None => {
                    param.name = name.clone();
                    let id = self.store.insert(param)?;
                    self.sharing.insert(name, own);
                    return Ok(id);
                }
            }
        }
        Err(Error::Registration(format!(
            "no free storage name for `{}` in objective `{scope}`",
            param.name
        )))
    }

    /// Attaches a head for a new objective.
    pub fn register(&mut self, req: HeadRequest) -> Result<(Head, MergeReport)> {
        let id = req.objective_id.clone();
        if self.heads.contains_key(&id) {
            return Err(Error::Registration(format!(
                "objective `{id}` is already registered"
            )));
        }
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::Registration(format!("invalid objective id `{id}`")));
        }
        let (head, module) = match req.module {
            Some(module) => {
                let weights: Vec<&Parameter> = module
                    .iter()
                    .filter(|p| !p.name.starts_with("body.") && p.name.ends_with(".out.weight"))
                    .collect();
                let [w] = weights.as_slice() else {
                    return Err(Error::Compatibility(format!(
                        "objective module for `{id}` must contain exactly one <prefix>.out.weight, found {}",
                        weights.len()
                    )));
                };
                if w.tensor.shape().len() != 2 {
                    return Err(Error::Compatibility(format!(
                        "head weight `{}` must be a matrix",
                        w.name
                    )));
                }
                let head = Head {
                    kind: req.kind,
                    n_outputs: w.tensor.shape()[1],
                    prefix: w.name.trim_end_matches(".out.weight").to_string(),
                };
                (head, module)
            }
            None => {
                let head = Head {
                    kind: req.kind,
                    n_outputs: req.n_outputs,
                    prefix: format!("head.{id}"),
                };
                if let Some(n) = self.model.expected_outputs(req.kind) {
                    if n != req.n_outputs {
                        return Err(Error::Compatibility(format!(
                            "{} head must emit {n} outputs, got {}",
                            req.kind, req.n_outputs
                        )));
                    }
                }
                if req.n_outputs == 0 {
                    return Err(Error::Compatibility(format!("head for `{id}` has no outputs")));
                }
                let params = self
                    .model
                    .init_head(&head, &mut self.streams.stream(&format!("init/head/{id}")));
                (head, params)
            }
        };
        // Validate against a scratch copy so a rejected module leaves no trace.
        let mut trial = self.clone();
        let (report, incoming) = trial.merge_shared_parameters(&id, module)?;
        let mut bindings = trial.body.clone();
        bindings.extend(incoming);
        trial
            .model
            .check_head(&head, ModelParams::new(&trial.store, &bindings))?;
        *self = trial;
        self.heads.insert(
            id.clone(),
            Registration {
                head: head.clone(),
                bindings,
            },
        );
        self.order.push(id);
        Ok((head, report))
    }

    /// Attaches the head an objective asks for.
    pub fn register_objective(&mut self, objective: &Objective) -> Result<(Head, MergeReport)> {
        let vocab = self.model.config().vocab_size;
        self.register(objective.head_request(vocab))
    }

    pub fn head_for(&self, objective_id: &str) -> Result<&Head> {
        self.registration(objective_id).map(|r| &r.head)
    }

    pub fn bindings_for(&self, objective_id: &str) -> Result<&Bindings> {
        self.registration(objective_id).map(|r| &r.bindings)
    }

    pub fn params_for(&self, objective_id: &str) -> Result<ModelParams<'_, f32>> {
        Ok(ModelParams::new(&self.store, self.bindings_for(objective_id)?))
    }

    fn registration(&self, objective_id: &str) -> Result<&Registration> {
        self.heads
            .get(objective_id)
            .ok_or_else(|| Error::Routing(format!("no head registered for objective `{objective_id}`")))
    }

    /// Canonical names and current values of everything objective
    /// `objective_id` sees: the body plus its head.
    pub fn objective_parameters(&self, objective_id: &str) -> Result<Vec<Parameter>> {
        let reg = self.registration(objective_id)?;
        let mut names: Vec<(&String, ParamId)> = reg.bindings.iter().map(|(n, &i)| (n, i)).collect();
        names.sort_by_key(|(n, i)| (!n.starts_with("body."), *i));
        Ok(names
            .into_iter()
            .map(|(n, id)| Parameter::new(n.clone(), self.store.get(id).tensor.clone()))
            .collect())
    }
}
