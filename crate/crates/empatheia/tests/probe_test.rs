// temporary convergence probe
use empatheia::config::SystemConfig;
use empatheia::data::{load_corpus, LoadOptions, SplitFilter};
use empatheia::training::{train, Stage, TrainRequest};
use std::path::Path;

fn probe_cfg(d: usize, l: usize, h: usize, lr: f64, steps: usize, batch: usize) -> SystemConfig {
    let mut cfg = SystemConfig::default();
    cfg.seed = 5;
    cfg.model.d_model = d;
    cfg.model.n_layers = l;
    cfg.model.n_heads = h;
    cfg.model.cs_latent = 8;
    cfg.model.cs_blocks = 1;
    cfg.model.cs_heads = 2;
    cfg.model.sd_style = 8;
    cfg.model.sd_blocks = 1;
    cfg.model.sd_heads = 2;
    cfg.model.d_text_acoustic = 4;
    cfg.model.d_text_prosodic = 4;
    cfg.model.d_content_v = 6;
    cfg.model.style_s_width = 5;
    cfg.model.style_v_width = 5;
    cfg.model.mel_bins = 6;
    cfg.model.motion_dims = 6;
    cfg.train.batch_size = batch;
    cfg.train.lr = lr;
    cfg.train.coe_steps = steps;
    cfg.train.ccl_steps = 1;
    cfg.train.sac_steps = 1;
    cfg.train.overall_steps = 1;
    cfg
}

fn run(tag: &str, cfg: &SystemConfig, n: usize) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture8.jsonl");
    let corpus = load_corpus(&path, SplitFilter::All, LoadOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = empatheia::encoders::FeatureStore::create(&dir.path().join("media")).unwrap();
    let t0 = std::time::Instant::now();
    let req = TrainRequest {
        cfg, corpus: &corpus[..n], store: &store,
        runs_root: &dir.path().join("runs"), run_name: "probe",
        stages: vec![Stage::Coe], from_scratch: false,
        corpus_label: "x".into(), store_label: "x".into(),
    };
    let runs = train(&req).unwrap();
    let rows = &runs[0].rows;
    let mut line = format!("{tag}:");
    for s in (0..rows.len()).step_by(50) {
        line.push_str(&format!(" {:.3}", rows[s].l_emp));
    }
    line.push_str(&format!(" | final {:.4} | {:.0}s", rows.last().unwrap().l_emp, t0.elapsed().as_secs_f64()));
    println!("{line}");
}

#[test]
fn probe_coe_convergence() {
    run("d32l2h4 lr1e-2 n8", &probe_cfg(32, 2, 4, 1e-2, 400, 8), 8);
    run("d32l2h4 lr3e-3 n8", &probe_cfg(32, 2, 4, 3e-3, 400, 8), 8);
    run("d64l2h4 lr1e-2 n8", &probe_cfg(64, 2, 4, 1e-2, 400, 8), 8);
}
