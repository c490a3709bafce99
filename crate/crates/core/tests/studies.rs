use std::path::{Path, PathBuf};

use emostress::config::RunConfig;
use emostress::experiments::{
    data_reduction_study, emotion_distribution_study, plan, primary_matrix, rerender, CellStatus,
    Corpora, Study, StudyContext,
};
use emostress::models::Architecture;

fn fixture_config(out: &Path) -> RunConfig {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny");
    let mut cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn primary_matrix_on_fixtures_is_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config(tmp.path());
    let corpora = Corpora::load(&cfg).unwrap();
    let ctx = StudyContext::new(&cfg, &corpora);

    let a = tmp.path().join("a");
    let report = primary_matrix(&ctx, &a).unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        assert_eq!(c.status, CellStatus::Done, "{}", c.id);
        let runs = &c.result.as_ref().unwrap().runs;
        assert_eq!(runs.len(), 3);
        for r in runs {
            let m: serde_json::Value =
                serde_json::from_str(&read(Path::new(r.manifest["path"].as_str().unwrap()))).unwrap();
            assert!(m["config"].is_object());
            assert!(m["data_fingerprints"]["minority/test"].is_string());
            for (name, _) in serde_json::from_value::<Vec<(String, String)>>(m["data_access"].clone()).unwrap() {
                assert!(!name.contains("/test"), "{name}");
            }
            assert_eq!(m["evaluated_on"].as_array().unwrap().len(), 3);
        }
        let trials = read(&a.join("cells").join(&c.id).join("trials.jsonl"));
        assert_eq!(trials.lines().count(), cfg.budget);
    }
    assert_eq!(report.minority_test.present_cells(), 4);
    assert_eq!(report.stress_test.present_cells(), 4);
    assert_eq!(report.minority_dev.present_cells(), 4);
    let text = read(&a.join("minority_test.txt"));
    assert!(text.contains("Multi-Alt") && text.contains("Prior best"), "{text}");
    assert_eq!(rerender(&a).unwrap()["minority_test"], report.minority_test.render());

    let b = tmp.path().join("b");
    primary_matrix(&ctx, &b).unwrap();
    for f in ["results.jsonl", "minority_test.txt", "stress_test.txt", "minority_dev.txt"] {
        let (x, y) = (read(&a.join(f)), read(&b.join(f)));
        assert_eq!(x.replace("/a/", "/b/"), y, "{f}");
    }
}

#[test]
fn missing_assets_skip_cells_without_failing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(tmp.path());
    cfg.budget = 1;
    cfg.early_stopping.max_epochs = 1;
    cfg.encoders.push(emostress::encoder::EncoderIdentity::pretrained(
        emostress::encoder::EncoderName::BaseGeneral,
        "no/such/dir",
    ));
    let corpora = Corpora::load(&cfg).unwrap();
    let ctx = StudyContext::new(&cfg, &corpora);
    let report = primary_matrix(&ctx, tmp.path()).unwrap();
    assert_eq!(report.cells.len(), 8);
    let skipped = report
        .cells
        .iter()
        .filter(|c| matches!(c.status, CellStatus::Skipped(_)))
        .count();
    assert_eq!(skipped, 4);
    assert_eq!(report.failed(), 0);
    let text = read(&tmp.path().join("stress_test.txt"));
    assert!(text.contains("skipped multi-base_general"), "{text}");
}

#[test]
fn reduction_study_emits_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(tmp.path());
    cfg.budget = 1;
    let corpora = Corpora::load(&cfg).unwrap();
    let ctx = StudyContext::new(&cfg, &corpora);
    let report = data_reduction_study(&ctx, tmp.path()).unwrap();
    assert_eq!(report.cells.len(), 4);
    assert_eq!(report.points.len(), 4);
    let sizes: Vec<usize> = report.cells.iter().map(|c| c.train_size).collect();
    assert_eq!(sizes, vec![18, 18, 36, 36]);
    for a in [Architecture::SingleTask, Architecture::Multi] {
        assert!(report.f1_at(a, emostress::encoder::EncoderName::TinyTest, 0.5).is_some());
    }
    let csv = read(&tmp.path().join("reduction.csv"));
    assert_eq!(csv.lines().count(), 5);
    assert!(read(&tmp.path().join("reduction.svg")).starts_with("<svg"));
}

#[test]
fn distribution_study_reports_groups_and_divergences() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config(tmp.path());
    let corpora = Corpora::load(&cfg).unwrap();
    let ctx = StudyContext::new(&cfg, &corpora);
    let report = emotion_distribution_study(&ctx, &cfg.encoders[0], tmp.path()).unwrap();
    assert_eq!(report.groups.len(), 4);
    assert_eq!(report.corpus_level.len(), 2);
    for g in report.groups.iter().chain(&report.corpus_level) {
        assert!(g.proportions.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert_eq!(report.corpus_level[0].n, 60);
    assert_eq!(report.corpus_level[1].n, 24);
    assert_eq!(report.within_corpus_l1.len(), 2);
    assert_eq!(report.labeler_test.n, 14);
    assert!(read(&tmp.path().join("distribution.csv")).lines().count() > 1);
    assert!(read(&tmp.path().join("distribution.svg")).starts_with("<svg"));
}

#[test]
fn plan_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config(tmp.path());
    let out = tmp.path().join("planned");
    let p = plan(&cfg, Study::Primary, &out);
    assert_eq!(p.cells.len(), 4);
    assert!(p.inputs.iter().all(|(_, ok)| *ok));
    assert_eq!(p.training_runs, 4 * (2 + 3) + 1);
    assert!(p.to_string().contains("multialt-tiny_test"));
    assert!(!out.exists());
}
