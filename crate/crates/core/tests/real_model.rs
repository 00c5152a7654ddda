//! Smoke tests against a locally downloaded GPT-2 small checkpoint. Ignored
//! by default; run explicitly once `checkpoints/gpt2` is populated:
//!
//! ```text
//! cargo test -p sylloscope --test real_model -- --ignored
//! ```

use std::path::PathBuf;
use std::time::Instant;

use sylloscope::dataset::{generate, SyllogismFamily, SyllogismKind};
use sylloscope::{CheckpointManifest, Model, Vocabulary};

fn checkpoint_dir() -> PathBuf {
    std::env::var_os("SYLLOSCOPE_CHECKPOINT")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../checkpoints/gpt2")
        })
}

#[test]
#[ignore = "needs checkpoints/gpt2 (or SYLLOSCOPE_CHECKPOINT)"]
fn checkpoint_loads_and_forward_is_sane() {
    let manifest = CheckpointManifest::from_dir(&checkpoint_dir()).expect("checkpoint present");
    let t = Instant::now();
    let model = Model::load(&manifest).expect("weights load");
    eprintln!("load: {:?}", t.elapsed());
    assert_eq!(model.config.n_layers, 12);

    let vocab = Vocabulary::load(&manifest.vocab_path, &manifest.merges_path).unwrap();
    let pair = sylloscope::dataset::BinaryPair::new(&vocab, " true", " false").unwrap();
    let kind = SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism);
    let data = generate(&vocab, kind, &pair, 8, 0).unwrap();

    // warm-up, then timed slim forwards
    let inst = &data.instances[0];
    let resid = model.forward_final_resid(&inst.clean_tokens).unwrap();
    let t = Instant::now();
    let mut lds = Vec::new();
    for inst in &data.instances {
        let resid = model.forward_final_resid(&inst.clean_tokens).unwrap();
        let (c, i) = model.readout_pair(&resid.view(), (inst.correct_id, inst.incorrect_id)).unwrap();
        lds.push(f64::from(c - i));
    }
    eprintln!(
        "slim forward: {:.1} ms/prompt over {} prompts (seq {})",
        t.elapsed().as_secs_f64() * 1e3 / data.len() as f64,
        data.len(),
        inst.clean_tokens.len(),
    );

    let t = Instant::now();
    let cache = model.forward_with_cache(&inst.clean_tokens).unwrap();
    eprintln!("cached forward: {:?}", t.elapsed());
    assert!(resid.iter().all(|x| x.is_finite()));
    assert!(cache.logits.iter().all(|x| x.is_finite()));
    assert!(lds.iter().all(|x| x.is_finite()));
    eprintln!("mean LD over 8 prompts: {:+.4}", lds.iter().sum::<f64>() / lds.len() as f64);
}
