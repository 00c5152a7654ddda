//! Circuits as component sets. A circuit is evaluated by running the model
//! with every attention head and MLP outside the set mean-ablated at all
//! positions; embeddings and LayerNorms always run.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{all_heads_and_mlps, ComponentId};
use crate::config::ModelConfig;
use crate::dataset::{generate_with, BinaryPair, GenOptions, SyllogismDataset, SyllogismKind};
use crate::error::{Error, Result};
use crate::metrics::{average_logit_diff, summarize, EvalSummary, LdRunner};
use crate::model::{HookSite, Model, PatchValue, Replacements};
use crate::patching::{mean_cache, mean_cache_and_logit_diffs, MeanCache};
use crate::tokenizer::Vocabulary;

/// A named set of retained heads and MLPs. The embedding path is implicitly
/// included and never ablated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CircuitSpec {
    pub name: String,
    pub included: BTreeSet<ComponentId>,
    pub notes: String,
}

impl CircuitSpec {
    pub fn new(
        name: impl Into<String>,
        components: impl IntoIterator<Item = ComponentId>,
    ) -> Self {
        let included = components
            .into_iter()
            .filter(|c| *c != ComponentId::Embed)
            .collect();
        CircuitSpec { name: name.into(), included, notes: String::new() }
    }

    pub fn with_notes(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }

    pub fn includes(&self, id: ComponentId) -> bool {
        id == ComponentId::Embed || self.included.contains(&id)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.included.iter().try_for_each(|c| c.validate(cfg))
    }

    pub fn heads(&self) -> Vec<ComponentId> {
        self.included
            .iter()
            .filter(|c| matches!(c, ComponentId::AttnHead { .. }))
            .copied()
            .collect()
    }

    pub fn mlps(&self) -> Vec<ComponentId> {
        self.included
            .iter()
            .filter(|c| matches!(c, ComponentId::Mlp { .. }))
            .copied()
            .collect()
    }

    /// Heads and MLPs of the config that the circuit ablates.
    pub fn excluded(&self, cfg: &ModelConfig) -> Vec<ComponentId> {
        all_heads_and_mlps(cfg)
            .into_iter()
            .filter(|c| !self.includes(*c))
            .collect()
    }

    /// Replaces the MLP membership, keeping heads; used by the CLI knob that
    /// overrides which MLPs a built-in circuit retains.
    pub fn with_mlps(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.included.retain(|c| !matches!(c, ComponentId::Mlp { .. }));
        self.included.extend(layers.into_iter().map(ComponentId::mlp));
        self
    }

    pub fn to_json(&self) -> String {
        let file = CircuitFile {
            name: self.name.clone(),
            heads: self.heads().iter().map(|c| c.to_string()).collect(),
            mlps: self
                .mlps()
                .iter()
                .filter_map(|c| c.layer())
                .collect(),
            notes: self.notes.clone(),
        };
        serde_json::to_string_pretty(&file).expect("circuit serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CircuitFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("circuit json: {e}")))?;
        let mut included = BTreeSet::new();
        for s in &file.heads {
            let id: ComponentId = s.parse()?;
            if !matches!(id, ComponentId::AttnHead { .. }) {
                return Err(Error::InvalidComponent(format!(
                    "`{s}` in the heads list is not a head"
                )));
            }
            included.insert(id);
        }
        included.extend(file.mlps.iter().map(|&l| ComponentId::mlp(l)));
        Ok(CircuitSpec { name: file.name, included, notes: file.notes })
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// On-disk form: `{"name": ..., "heads": ["7.2", ...], "mlps": [8, 9, 10]}`.
#[derive(Serialize, Deserialize)]
struct CircuitFile {
    name: String,
    #[serde(default)]
    heads: Vec<String>,
    #[serde(default)]
    mlps: Vec<usize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    notes: String,
}

fn heads_plus_mlps(
    heads: &[(usize, usize)],
    mlps: impl IntoIterator<Item = usize>,
) -> Vec<ComponentId> {
    heads
        .iter()
        .map(|&(l, h)| ComponentId::head(l, h))
        .chain(mlps.into_iter().map(ComponentId::mlp))
        .collect()
}

/// The five heads whose direct effects dominate the simple task, plus MLPs
/// 0-10. Under all-position mean ablation the MLP stack is load-bearing
/// infrastructure (layer 0 in particular acts as a per-token extended
/// embedding): ablating it collapses the task for any head set, so the heads
/// are only sufficient with these MLPs left running. The final-layer MLP is
/// ablated; it is mildly suppressive on this task.
pub fn simple_task_circuit() -> CircuitSpec {
    let heads = [(7, 2), (9, 1), (9, 9), (10, 1), (10, 4)];
    CircuitSpec::new("truth-heads", heads_plus_mlps(&heads, 0..=10)).with_notes(
        "Heads that copy the attended truth value toward the logits; MLPs 0-10 \
         retained as infrastructure.",
    )
}

/// The five heads whose direct effects dominate the opposite task, plus MLPs
/// 0-10. Layers 8-10 carry the rescaling that flips the suppressed value;
/// the earlier MLPs are required infrastructure under all-position mean
/// ablation.
pub fn opposite_task_circuit() -> CircuitSpec {
    let heads = [(7, 3), (8, 8), (8, 10), (9, 7), (10, 7)];
    CircuitSpec::new("negative-truth-heads", heads_plus_mlps(&heads, 0..=10)).with_notes(
        "Heads that suppress the attended truth value; MLPs 0-10 retained, \
         layers 8-10 do the flipping.",
    )
}

/// A model restricted to a circuit: one shared replacement set pins every
/// excluded head's output and every excluded MLP's output to dataset means.
pub struct CircuitRunner<'m> {
    model: &'m Model,
    replacements: Replacements,
}

impl<'m> CircuitRunner<'m> {
    pub fn new(model: &'m Model, circuit: &CircuitSpec, mean: &MeanCache) -> Result<Self> {
        circuit.validate(&model.config)?;
        let mut replacements = Replacements::new();
        for id in circuit.excluded(&model.config) {
            let site = match id {
                ComponentId::AttnHead { layer, head } => HookSite::HeadResult { layer, head },
                ComponentId::Mlp { layer } => HookSite::MlpOut(layer),
                ComponentId::Embed => continue,
            };
            let value = mean
                .get(site)
                .ok_or_else(|| Error::InvalidSite(format!("mean cache lacks {site}")))?
                .to_owned();
            replacements.set(site, PatchValue::Full(value));
        }
        Ok(CircuitRunner { model, replacements })
    }
}

impl LdRunner for CircuitRunner<'_> {
    fn logit_diffs(&self, dataset: &SyllogismDataset) -> Result<Vec<f64>> {
        dataset
            .instances
            .par_iter()
            .map(|inst| {
                let resid = self
                    .model
                    .forward_hooked_final_resid(&inst.clean_tokens, &self.replacements)?;
                let (c, i) =
                    self.model.readout_pair(&resid.view(), (inst.correct_id, inst.incorrect_id))?;
                Ok(f64::from(c - i))
            })
            .collect()
    }
}

/// Evaluates a circuit on a dataset. The mean cache is computed from the
/// dataset's clean runs when not supplied. An empty circuit is legal and
/// yields the fully-ablated baseline.
pub fn eval_circuit(
    model: &Model,
    circuit: &CircuitSpec,
    dataset: &SyllogismDataset,
    mean: Option<&MeanCache>,
) -> Result<EvalSummary> {
    let storage;
    let mean = match mean {
        Some(m) => m,
        None => {
            storage = mean_cache(model, dataset)?;
            &storage
        }
    };
    if mean.seq_len != dataset.seq_len() {
        return Err(Error::InvalidArgument(format!(
            "mean cache covers length {} but dataset has length {}",
            mean.seq_len,
            dataset.seq_len()
        )));
    }
    let runner = CircuitRunner::new(model, circuit, mean)?;
    average_logit_diff(&runner, dataset)
}

/// One table cell: full-model and circuit ALDs for a task kind and word pair.
#[derive(Clone, Debug, Serialize)]
pub struct TransferCell {
    /// Kind in its display form, e.g. "ss1".
    pub kind: String,
    pub pair: String,
    pub model_ald: f64,
    pub circuit_ald: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferTable {
    pub circuit: String,
    pub seed: u64,
    pub cells: Vec<TransferCell>,
}

/// Evaluates the full model and the circuit over freshly generated datasets
/// for every (kind, pair) combination. Each dataset supplies its own ablation
/// means.
#[allow(clippy::too_many_arguments)]
pub fn transfer_matrix(
    model: &Model,
    vocab: &Vocabulary,
    circuit: &CircuitSpec,
    kinds: &[SyllogismKind],
    pairs: &[BinaryPair],
    n: usize,
    seed: u64,
    options: GenOptions,
) -> Result<TransferTable> {
    if kinds.is_empty() || pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut datasets = Vec::with_capacity(kinds.len() * pairs.len());
    for &kind in kinds {
        for pair in pairs {
            datasets.push(generate_with(vocab, kind, pair, n, seed, options)?);
        }
    }
    transfer_matrix_over(model, circuit, &datasets, seed)
}

/// `transfer_matrix` over already-built datasets, one cell per dataset.
pub fn transfer_matrix_over(
    model: &Model,
    circuit: &CircuitSpec,
    datasets: &[SyllogismDataset],
    seed: u64,
) -> Result<TransferTable> {
    if datasets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut cells = Vec::with_capacity(datasets.len());
    for dataset in datasets {
        // One cached pass yields both the ablation means and the model's
        // own logit differences.
        let (mean, lds) = mean_cache_and_logit_diffs(model, dataset)?;
        let model_summary = summarize(&lds, &dataset.gold_positive())?;
        let circuit_summary = eval_circuit(model, circuit, dataset, Some(&mean))?;
        cells.push(TransferCell {
            kind: dataset.kind.to_string(),
            pair: dataset.pair.name(),
            model_ald: model_summary.ald,
            circuit_ald: circuit_summary.ald,
            n: dataset.len(),
        });
    }
    Ok(TransferTable { circuit: circuit.name.clone(), seed, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SyllogismFamily, SyllogismInstance};
    use crate::model::ActivationCache;
    use crate::toy::{build_toy, PlantedBehaviors, ToySpec};
    use crate::weights::CheckpointFormat;

    fn noise_model(seed: u64) -> Model {
        let spec = ToySpec {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            seed,
            planted: PlantedBehaviors::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_toy(&spec, dir.path(), CheckpointFormat::Safetensors).unwrap();
        Model::load(&manifest).unwrap()
    }

    fn toy_dataset(model: &Model, n: usize, seq: usize, seed: u64) -> SyllogismDataset {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = model.config.n_vocab as u32;
        let instances = (0..n)
            .map(|i| {
                let clean: Vec<u32> = (0..seq).map(|_| rng.gen_range(0..v)).collect();
                let corrupted: Vec<u32> = (0..seq).map(|_| rng.gen_range(0..v)).collect();
                SyllogismInstance {
                    clean_tokens: clean,
                    corrupted_tokens: corrupted,
                    correct_id: if i % 2 == 0 { 1 } else { 2 },
                    incorrect_id: if i % 2 == 0 { 2 } else { 1 },
                    letters: vec![],
                    truth_assignment: vec![i % 2 == 0],
                }
            })
            .collect();
        SyllogismDataset {
            kind: SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism),
            pair: BinaryPair {
                positive_word: " true".into(),
                negative_word: " false".into(),
                positive_id: 1,
                negative_id: 2,
            },
            instances,
            seed,
            eot_prepended: false,
        }
    }

    fn full_circuit(cfg: &ModelConfig) -> CircuitSpec {
        CircuitSpec::new("everything", all_heads_and_mlps(cfg))
    }

    #[test]
    fn json_round_trip_and_example_shape() {
        let spec = CircuitSpec::new(
            "truth-heads",
            [ComponentId::head(7, 2), ComponentId::mlp(8), ComponentId::mlp(10)],
        )
        .with_notes("demo");
        let text = spec.to_json();
        assert_eq!(CircuitSpec::from_json(&text).unwrap(), spec);

        let parsed = CircuitSpec::from_json(
            r#"{"name": "c", "heads": ["7.2", "9.1"], "mlps": [8, 9, 10]}"#,
        )
        .unwrap();
        assert_eq!(parsed.heads().len(), 2);
        assert_eq!(parsed.mlps().len(), 3);
        assert!(parsed.includes(ComponentId::head(9, 1)));
        assert!(parsed.includes(ComponentId::Embed));
        assert!(!parsed.includes(ComponentId::head(0, 0)));

        assert!(CircuitSpec::from_json(r#"{"name": "c", "heads": ["mlp3"]}"#).is_err());
    }

    #[test]
    fn validate_rejects_out_of_range_members() {
        let model = noise_model(11);
        let bad = CircuitSpec::new("bad", [ComponentId::head(2, 0)]);
        assert!(bad.validate(&model.config).is_err());
        let ok = simple_task_circuit();
        assert!(ok.validate(&ModelConfig::gpt2_small()).is_ok());
        assert!(ok.validate(&model.config).is_err());
    }

    #[test]
    fn mlp_override_swaps_only_mlps() {
        let circuit = simple_task_circuit().with_mlps([8, 9, 10]);
        assert_eq!(circuit.heads().len(), 5);
        assert_eq!(
            circuit.mlps(),
            vec![ComponentId::mlp(8), ComponentId::mlp(9), ComponentId::mlp(10)]
        );
    }

    #[test]
    fn full_circuit_matches_model_exactly() {
        let model = noise_model(3);
        let data = toy_dataset(&model, 6, 7, 40);
        let full = eval_circuit(&model, &full_circuit(&model.config), &data, None).unwrap();
        let plain = average_logit_diff(&model, &data).unwrap();
        assert_eq!(full.ald, plain.ald);
        assert_eq!(crate::metrics::faithfulness(plain.ald, full.ald), 0.0);
    }

    #[test]
    fn single_exclusion_equals_hand_built_hooked_forward() {
        let model = noise_model(4);
        let data = toy_dataset(&model, 5, 6, 41);
        let mean = mean_cache(&model, &data).unwrap();

        let mut members = all_heads_and_mlps(&model.config);
        members.retain(|c| *c != ComponentId::head(1, 2));
        let summary =
            eval_circuit(&model, &CircuitSpec::new("minus-1.2", members), &data, Some(&mean))
                .unwrap();

        let mut lds = Vec::new();
        for inst in &data.instances {
            let mut reps = Replacements::new();
            reps.set(
                HookSite::HeadResult { layer: 1, head: 2 },
                PatchValue::Full(
                    mean.get(HookSite::HeadResult { layer: 1, head: 2 }).unwrap().to_owned(),
                ),
            );
            let cache: ActivationCache = model.forward_hooked(&inst.clean_tokens, &reps).unwrap();
            let last = cache.layers.last().unwrap().resid_post.nrows() - 1;
            let resid = cache.layers.last().unwrap().resid_post.row(last).to_owned();
            let (c, i) = model
                .readout_pair(&resid.view(), (inst.correct_id, inst.incorrect_id))
                .unwrap();
            lds.push(f64::from(c - i));
        }
        let by_hand = lds.iter().sum::<f64>() / lds.len() as f64;
        assert!((summary.ald - by_hand).abs() < 1e-5, "{} vs {by_hand}", summary.ald);
    }

    #[test]
    fn empty_circuit_is_legal_and_distinct() {
        let model = noise_model(5);
        let data = toy_dataset(&model, 4, 5, 42);
        let empty = eval_circuit(&model, &CircuitSpec::new("none", []), &data, None).unwrap();
        let plain = average_logit_diff(&model, &data).unwrap();
        assert!(empty.ald.is_finite());
        assert_ne!(empty.ald, plain.ald);
    }

    #[test]
    fn mean_cache_length_mismatch_is_reported() {
        let model = noise_model(6);
        let data = toy_dataset(&model, 4, 5, 43);
        let other = toy_dataset(&model, 4, 8, 44);
        let mean = mean_cache(&model, &other).unwrap();
        let err = eval_circuit(&model, &full_circuit(&model.config), &data, Some(&mean));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn transfer_rows_coincide_for_full_circuit_and_runs_deterministically() {
        let model = noise_model(7);
        let datasets = vec![toy_dataset(&model, 4, 6, 50), toy_dataset(&model, 4, 6, 51)];
        let run =
            || transfer_matrix_over(&model, &full_circuit(&model.config), &datasets, 9).unwrap();
        let table = run();
        assert_eq!(table.cells.len(), 2);
        for cell in &table.cells {
            assert_eq!(cell.model_ald, cell.circuit_ald);
            assert_eq!(cell.n, 4);
        }
        let again = run();
        for (a, b) in table.cells.iter().zip(&again.cells) {
            assert_eq!(a.model_ald, b.model_ald);
            assert_eq!(a.circuit_ald, b.circuit_ald);
        }
        assert!(transfer_matrix_over(&model, &full_circuit(&model.config), &[], 9).is_err());
    }
}
