//! Regenerate the committed golden fixtures under tests/fixtures/.
//!
//! Run explicitly (never from tests):
//!
//!     cargo run -p cromekit-core --example regen_fixtures
//!
//! Review the diff before committing.

use std::path::PathBuf;

use cromekit_core::config::RunConfig;
use cromekit_core::data::{generate, save, GenSpec};
use cromekit_core::detector::ablation_manifest;
use cromekit_core::encoders::EncoderSet;
use cromekit_core::metric::assign_proxies;
use cromekit_core::model::CroMeModel;
use cromekit_core::numerics::tape::Tape;
use cromekit_core::params::Params;
use cromekit_core::training::{export_embeddings, train, write_embeddings_csv, ExportStage};

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The shared tiny config used by every golden fixture.
pub fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 2024;
    cfg.dims.d_raw = 6;
    cfg.dims.d_hidden = 5;
    cfg.dims.d_emb = 4;
    cfg.dims.k_img = 2;
    cfg.dims.k_txt = 2;
    cfg.fusion.d_c = 8;
    cfg.fusion.heads = 2;
    cfg.detector.hidden = 6;
    cfg.training.batch = 16;
    cfg.training.epochs = 1;
    cfg.gen = GenSpec {
        n_samples: 40,
        n_topics: 3,
        d_raw: 6,
        k_img: 2,
        k_txt: 2,
        seed: 2024,
        ..GenSpec::default()
    };
    cfg
}

fn sha256_hex(bytes: &[u8]) -> String {
    // Tiny pure-Rust SHA-256 is overkill here; shell out to the same hashing
    // the cli uses would add a dependency. Fixtures only need a stable
    // digest, so reuse the FNV-based content hash below.
    // (Golden comparisons of numeric content use exact JSON instead.)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("fnv1a64:{h:016x}")
}

fn main() {
    let dir = fixtures_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = fixture_config();

    // 1. Ablation manifest (external fixture contract).
    let manifest: Vec<serde_json::Value> = ablation_manifest()
        .into_iter()
        .map(|(name, flags)| {
            serde_json::json!({
                "variant": name,
                "flags": flags,
            })
        })
        .collect();
    std::fs::write(
        dir.join("ablation_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .unwrap();

    // 2. Golden dataset file + content hash + proxy assignment.
    let ds = generate(&cfg.gen).unwrap();
    let ds_path = dir.join("dataset_golden.jsonl");
    save(&ds, &ds_path).unwrap();
    let bytes = std::fs::read(&ds_path).unwrap();
    std::fs::write(dir.join("dataset_golden.hash"), sha256_hex(&bytes)).unwrap();
    let proxies = assign_proxies(&ds.labels()).unwrap();
    std::fs::write(
        dir.join("proxies_golden.json"),
        serde_json::to_string_pretty(&proxies).unwrap(),
    )
    .unwrap();

    // 3. Golden encoder bundle on the first sample.
    let mut params = Params::new();
    let enc = EncoderSet::init(&mut params, cfg.dims, cfg.seed).unwrap();
    let mut tape = Tape::new();
    let bundle = enc.encode_bundle(&mut tape, &params, &ds.samples[0]).unwrap();
    let bundle_json = serde_json::json!({
        "sample_id": ds.samples[0].id,
        "z_i1": tape.value(bundle.z_i1),
        "z_i2": tape.value(bundle.z_i2),
        "z_t1": tape.value(bundle.z_t1),
        "z_t2": tape.value(bundle.z_t2),
        "z_b": tape.value(bundle.z_b),
        "z_i": tape.value(bundle.z_i),
        "z_t": tape.value(bundle.z_t),
    });
    std::fs::write(
        dir.join("bundle_golden.json"),
        serde_json::to_string_pretty(&bundle_json).unwrap(),
    )
    .unwrap();

    // 4. Golden fused forward (cmttf intermediates) on a 2-sample eval batch.
    let (model, mut state) = CroMeModel::build(&cfg).unwrap();
    let mut tape = Tape::new();
    let refs: Vec<_> = ds.samples.iter().take(2).collect();
    let mut rng = cromekit_core::numerics::rng::RngStream::new(0, "fixture-eval");
    let out = model
        .forward_batch(
            &mut tape,
            &mut state,
            &refs,
            cromekit_core::numerics::tape::Mode::Eval,
            None,
            None,
            &mut rng,
            true,
        )
        .unwrap();
    let st = out.fusion_states.as_ref().unwrap()[0].materialize(&tape);
    let fused_json = serde_json::json!({
        "f_t_to_i": st.f_t_to_i,
        "f_i_to_t": st.f_i_to_t,
        "c1": st.c1,
        "c2": st.c2,
        "z_c": st.z_c,
        "unified": st.unified,
        "probs": tape.value(out.probs),
    });
    std::fs::write(
        dir.join("forward_golden.json"),
        serde_json::to_string_pretty(&fused_json).unwrap(),
    )
    .unwrap();

    // 5. Golden one-epoch training trajectory (per-batch losses) + final
    //    checkpoint + eval report.
    let run_dir = dir.join("run_golden");
    let _ = std::fs::remove_dir_all(&run_dir);
    std::fs::create_dir_all(&run_dir).unwrap();
    let outcome = train(&cfg, &ds, Some(&run_dir), |_| {}).unwrap();
    std::fs::write(
        dir.join("train_golden.json"),
        serde_json::to_string_pretty(&outcome.epoch_logs).unwrap(),
    )
    .unwrap();

    // Golden report: the fixture checkpoint evaluated on the full golden
    // dataset (reloaded through the checkpoint path to pin that contract).
    let mut reloaded =
        cromekit_core::training::load_checkpoint(&run_dir.join("checkpoint.json")).unwrap();
    let (report, _) =
        cromekit_core::training::evaluate_model(&reloaded.model, &mut reloaded.state, &ds)
            .unwrap();
    std::fs::write(
        dir.join("eval_golden.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .unwrap();

    // 6. Golden embedding export hash (pre-classifier stage).
    let mut trainer = outcome.trainer;
    let rows = export_embeddings(
        &trainer.model,
        &mut trainer.state,
        &ds,
        ExportStage::PreClassifier,
    )
    .unwrap();
    let export_path = dir.join("export_golden.csv");
    write_embeddings_csv(&rows, &export_path).unwrap();
    let export_bytes = std::fs::read(&export_path).unwrap();
    std::fs::write(dir.join("export_golden.hash"), sha256_hex(&export_bytes)).unwrap();

    println!("fixtures regenerated under {}", dir.display());
}
