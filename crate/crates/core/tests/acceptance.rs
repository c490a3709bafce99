//! Acceptance criteria, one report line each.
//!
//! Criteria 1-7 run on the tiny encoder. Criteria 8-9 need the real corpora
//! (`EMOSTRESS_DATA_CONFIG` naming a run config). Criteria 10-13 read the
//! outputs of finished studies from `EMOSTRESS_PRIMARY_DIR`,
//! `EMOSTRESS_REDUCTION_DIR` and `EMOSTRESS_EMOTIONS_DIR`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use emostress::autograd::{ForwardCtx, Gradients, ParamGroup, ParamKey, Tape};
use emostress::config::RunConfig;
use emostress::corpus::{
    corpus_stats, published, reduce_training_set, split_dataset, Partition, Source, StressLabel,
    TextExample, TrainDev,
};
use emostress::emotaxonomy::{validate_taxonomy, CoarseEmotion, EmotionVector, REFERENCE_COUNTS};
use emostress::encoder::{EncoderIdentity, EncoderName};
use emostress::evalkit::{accuracy, binary_f1, macro_f1, reference, ResultsGrid};
use emostress::experiments::{Corpora, DistributionReport};
use emostress::models::{
    combined_loss, combined_loss_node, emotion_loss, emotion_loss_node, stress_loss, stress_loss_node,
    tiny_model, Architecture, AssembledModel, ModelConfig, Task,
};
use emostress::tokenize::TokenizedInput;
use emostress::trainer::{
    evaluate_stress, stop_epoch, train_alternating, train_fine_tune, train_joint, train_single_task,
    EarlyStopPolicy, StopReason, TrainOptions,
};
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Check = fn() -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

// 1 ------------------------------------------------------------------------

fn joint(m: &AssembledModel, toks: &[TokenizedInput], lambda: f64) -> (f64, Gradients) {
    let batch: Vec<&TokenizedInput> = toks.iter().collect();
    let mut tape = Tape::new();
    let out = m
        .forward(&mut tape, &batch, &[Task::Stress, Task::Emotion], &mut ForwardCtx::eval())
        .unwrap();
    let ls = stress_loss_node(&mut tape, out.stress.unwrap(), &[StressLabel::Stressed, StressLabel::NotStressed]).unwrap();
    let le = emotion_loss_node(
        &mut tape,
        out.emotion.unwrap(),
        &[
            EmotionVector::from_labels([CoarseEmotion::Fear, CoarseEmotion::Sadness]),
            EmotionVector::from_labels([CoarseEmotion::Joy]),
        ],
    )
    .unwrap();
    let l = combined_loss_node(&mut tape, ls, le, lambda).unwrap();
    (tape.scalar(l), tape.backward(l).unwrap())
}

fn group_task(g: ParamGroup) -> Task {
    match g {
        ParamGroup::EmotionHead => Task::Emotion,
        _ => Task::Stress,
    }
}

fn tokens(m: &AssembledModel, texts: &[&str]) -> Vec<TokenizedInput> {
    texts.iter().map(|t| m.encoder().tokenize(t).unwrap()).collect()
}

fn loss_correctness() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut fails = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if !close(got, want, 1e-6) {
            fails.push(format!("{name}: {got} vs {want}"));
        }
    };
    let s = |l: [f64; 2], g: StressLabel| stress_loss(array![[l[0], l[1]]].view(), &[g]).unwrap();
    expect("nll uniform/0", s([0.0, 0.0], StressLabel::NotStressed), ln2);
    expect("nll uniform/1", s([0.0, 0.0], StressLabel::Stressed), ln2);
    expect("nll saturated", s([20.0, -20.0], StressLabel::NotStressed), 0.0);
    expect("nll gap 2", s([1.0, -1.0], StressLabel::Stressed), (1.0 + 2f64.exp()).ln());
    let e = |l: [f64; 7], g: EmotionVector| emotion_loss(ndarray::Array2::from_shape_vec((1, 7), l.to_vec()).unwrap().view(), &[g]).unwrap();
    let fear = EmotionVector::from_labels([CoarseEmotion::Fear]);
    expect("bce zero logits", e([0.0; 7], fear), ln2);
    let mut sat = [-20.0; 7];
    sat[CoarseEmotion::Fear.index()] = 20.0;
    expect("bce saturated", e(sat, fear), 0.0);
    let mut one = [-40.0; 7];
    one[CoarseEmotion::Fear.index()] = 1.0;
    expect("bce single label", 7.0 * e(one, fear), (1.0 + (-1.0f64).exp()).ln());
    expect("combined 0.5", combined_loss(2.0, 1.0, 0.5).unwrap(), 1.5);
    expect("combined 0", combined_loss(123.0, 0.25, 0.0).unwrap(), 0.25);
    expect("combined 0.9", combined_loss(1.0, 2.0, 0.9).unwrap(), 1.1);

    let mut m = tiny_model(Architecture::Multi, 9);
    let toks = tokens(&m, &["finite differences on a tiny model", "second row"]);
    let (_, grads) = joint(&m, &toks, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let group = ParamGroup::ALL[rng.random_range(0..3)];
        let n = match group {
            ParamGroup::Encoder => m.encoder().params().len(),
            _ => 2,
        };
        let pi = rng.random_range(0..n);
        let len = match group {
            ParamGroup::Encoder => m.encoder().params().value(pi).len(),
            _ => m.head(group_task(group)).unwrap().params().value(pi).len(),
        };
        let ei = rng.random_range(0..len);
        let set = |m: &mut AssembledModel, delta: f64| {
            let mut stores = m.stores_mut().unwrap();
            let (_, store) = stores.iter_mut().find(|(g, _)| *g == group).unwrap();
            store.value_mut(pi).as_slice_mut().unwrap()[ei] += delta;
        };
        set(&mut m, h);
        let (up, _) = joint(&m, &toks, 0.4);
        set(&mut m, -2.0 * h);
        let (down, _) = joint(&m, &toks, 0.4);
        set(&mut m, h);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads
            .get(ParamKey { group, index: pi })
            .map(|g| g.as_slice().unwrap()[ei])
            .unwrap_or(0.0);
        // below ~1e-4 the central difference is round-off
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    if worst >= 1e-4 {
        fails.push(format!("finite differences: worst relative error {worst:.2e}"));
    }
    check(fails.is_empty(), if fails.is_empty() {
        format!("closed forms within 1e-6; worst FD relative error {worst:.2e} over 20 parameters")
    } else {
        fails.join("; ")
    })
}

// 2 ------------------------------------------------------------------------

fn separable(n: usize) -> Vec<TextExample> {
    (0..n)
        .map(|i| {
            let pos = i % 2 == 0;
            let text = if pos {
                format!("deadline panic anxious overwhelmed {i}")
            } else {
                format!("calm sunny relaxed garden {i}")
            };
            let mut e = TextExample::stress(format!("x{i}"), text, StressLabel::from_bool(pos));
            e.emotion_vector = Some(EmotionVector::from_labels([if pos { CoarseEmotion::Fear } else { CoarseEmotion::Joy }]));
            e
        })
        .collect()
}

fn emotion_set(n: usize) -> Vec<TextExample> {
    let words = ["angry furious", "gross vile", "scared afraid", "happy great", "okay table", "sad lonely", "wow shocked"];
    (0..n)
        .map(|i| {
            let l = CoarseEmotion::ALL[i % 7];
            TextExample::emotion(format!("e{i}"), format!("{} {i}", words[i % 7]), EmotionVector::from_labels([l]))
        })
        .collect()
}

fn tiny_config(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::new(arch, EncoderIdentity::tiny());
    c.learning_rate = 1e-3;
    c
}

fn gradient_routing() -> Outcome {
    let m = tiny_model(Architecture::Multi, 5);
    let toks = tokens(&m, &["i cannot sleep before exams", "what a lovely day"]);
    let (_, g0) = joint(&m, &toks, 0.0);
    let stress_zero = g0
        .group(ParamGroup::StressHead)
        .iter()
        .flatten()
        .all(|t| t.iter().all(|&v| v == 0.0));
    let (_, g9) = joint(&m, &toks, 0.9);
    let scaled = g9
        .group(ParamGroup::EmotionHead)
        .iter()
        .flatten()
        .zip(g0.group(ParamGroup::EmotionHead).iter().flatten())
        .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| (x - 0.1 * y).abs() <= 1e-12 * y.abs().max(1.0)));

    let train = separable(16);
    let emo = emotion_set(14);
    let opts = TrainOptions {
        batch_size: 4,
        policy: EarlyStopPolicy { max_epochs: 2, ..Default::default() },
        emotion_loss_scale: 0.0,
        ..Default::default()
    };
    let stress = TrainDev::new("syn/train", &train, "syn/dev", &train);
    let emotion = TrainDev::new("emo/train", &emo, "emo/dev", &emo);
    let out = train_alternating(&tiny_config(Architecture::MultiAlt), &emotion, &stress, &opts, 3).unwrap();
    let init = tiny_model(Architecture::MultiAlt, 3);
    let head_frozen = out.model.emotion_head().unwrap().is_untrained();
    let encoder_moved = out.model.encoder().fingerprint() != init.encoder().fingerprint();
    check(
        stress_zero && g9.max_abs(ParamGroup::StressHead) > 0.0 && scaled && head_frozen && encoder_moved,
        format!(
            "lambda=0 stress-head grad exactly 0: {stress_zero}; lambda=0.9 emotion grad = 0.1x: {scaled}; \
             emotion-disabled alternation keeps head at init: {head_frozen}, encoder moved: {encoder_moved}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn fine_tune_transfer() -> Outcome {
    let train = separable(12);
    let emo = emotion_set(14);
    let opts = TrainOptions {
        batch_size: 4,
        policy: EarlyStopPolicy { max_epochs: 2, ..Default::default() },
        ..Default::default()
    };
    let out = train_fine_tune(
        &tiny_config(Architecture::FineTune),
        &TrainDev::new("emo/train", &emo, "emo/dev", &emo),
        &TrainDev::new("syn/train", &train, "syn/dev", &train),
        &opts,
        11,
    )
    .unwrap();
    let t = out.transfer.clone().unwrap();
    let stage1 = out.stage1.as_ref().unwrap().model.encoder().fingerprint();
    check(
        t.stage1_final == t.stage2_initial && stage1 == t.stage1_final,
        format!("stage-1 final {} == stage-2 initial {}", &t.stage1_final[..16], &t.stage2_initial[..16]),
    )
}

// 4 ------------------------------------------------------------------------

fn early_stopping() -> Outcome {
    let p = EarlyStopPolicy::default();
    let ok_policy = p.max_epochs == 20 && p.patience == 5 && p.tolerance == 1e-4;
    let cases: Vec<(Vec<f64>, Option<(usize, StopReason)>)> = vec![
        (vec![0.5; 6], Some((6, StopReason::Patience))),
        (vec![0.5, 0.5001, 0.5001, 0.5001, 0.5001, 0.5001], Some((6, StopReason::Patience))),
        (vec![0.5, 0.50011, 0.5, 0.5, 0.5, 0.5, 0.5], Some((7, StopReason::Patience))),
        ((0..25).map(|i| 0.5 + 0.01 * i as f64).collect(), Some((20, StopReason::MaxEpochs))),
        (vec![0.5, 0.6, 0.7], None),
    ];
    let mut bad = Vec::new();
    for (seq, want) in &cases {
        let got = stop_epoch(p, seq);
        if got != *want {
            bad.push(format!("{seq:?}: {got:?} vs {want:?}"));
        }
    }
    check(ok_policy && bad.is_empty(), if bad.is_empty() {
        format!("{} scripted sequences stop exactly per policy (20/5/1e-4)", cases.len())
    } else {
        bad.join("; ")
    })
}

// 5 ------------------------------------------------------------------------

fn overfit() -> Outcome {
    let train = separable(32);
    let emo = emotion_set(14);
    let opts = TrainOptions {
        batch_size: 8,
        policy: EarlyStopPolicy { max_epochs: 1000, patience: 1000, tolerance: 1e-4 },
        max_steps: Some(200),
        ..Default::default()
    };
    let stress = TrainDev::new("syn/train", &train, "syn/dev", &train);
    let emotion = TrainDev::new("emo/train", &emo, "emo/dev", &emo);
    let mut parts = Vec::new();
    let mut ok = true;
    for arch in Architecture::ALL {
        let cfg = tiny_config(arch);
        let out = match arch {
            Architecture::SingleTask => train_single_task(&cfg, Task::Stress, &stress, &opts, 1),
            Architecture::FineTune => train_fine_tune(&cfg, &emotion, &stress, &opts, 1),
            Architecture::MultiAlt => train_alternating(&cfg, &emotion, &stress, &opts, 1),
            Architecture::Multi => train_joint(&cfg, &stress, &opts, 1),
        }
        .unwrap();
        let f1 = evaluate_stress(&out.model, "syn/train", &train).unwrap().f1;
        ok &= f1 >= 95.0 && out.steps <= 200;
        parts.push(format!("{} {:.1} ({} steps)", arch.key(), f1, out.steps));
    }
    check(ok, format!("train F1: {}", parts.join(", ")))
}

// 6 ------------------------------------------------------------------------

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let g: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (a, b) in p.iter().zip(&g) {
            match (a, b) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let f1 = if tp == 0.0 { 0.0 } else { 100.0 * 2.0 * tp / (2.0 * tp + fp + fn_) };
        let acc = 100.0 * p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / n as f64;
        if !close(binary_f1(&p, &g).unwrap().value, f1, 1e-9) || !close(accuracy(&p, &g).unwrap(), acc, 1e-9) {
            bad += 1;
        }
        let ev = |r: &mut ChaCha8Rng| -> Vec<EmotionVector> {
            (0..n)
                .map(|_| {
                    let mut b = [false; 7];
                    for x in &mut b {
                        *x = r.random_bool(0.3);
                    }
                    EmotionVector(b)
                })
                .collect()
        };
        let (pe, ge) = (ev(&mut rng), ev(&mut rng));
        let brute: f64 = CoarseEmotion::ALL
            .iter()
            .map(|l| {
                let pp: Vec<bool> = pe.iter().map(|v| v.get(*l)).collect();
                let gg: Vec<bool> = ge.iter().map(|v| v.get(*l)).collect();
                binary_f1(&pp, &gg).unwrap().value
            })
            .sum::<f64>()
            / 7.0;
        if !close(macro_f1(&pe, &ge).unwrap().value, brute, 1e-9) {
            bad += 1;
        }
    }
    let hand = binary_f1(&[true, true, false, false], &[true, false, true, false]).unwrap().value;
    check(bad == 0 && hand == 50.0, format!("{bad} disagreements over 1000 random cases; hand example F1 = {hand}"))
}

// 7 ------------------------------------------------------------------------

fn synthetic_corpus(n: usize, source: Source) -> Vec<TextExample> {
    (0..n)
        .map(|i| match source {
            Source::Emotion => TextExample::emotion(format!("g{i}"), format!("text {i}"), EmotionVector::from_labels([CoarseEmotion::Joy])),
            _ => TextExample::stress(format!("d{i}"), format!("text {i}"), StressLabel::from_bool(i % 3 == 0)),
        })
        .collect()
}

fn data_plumbing() -> Outcome {
    let cfg = RunConfig::load(&fixtures().join("published.toml")).unwrap();
    let mut bad = Vec::new();
    for (source, want) in [
        (Source::Stress, published::STRESS),
        (Source::Emotion, published::EMOTION),
        (Source::Minority, published::MINORITY),
    ] {
        let counts = cfg.split_counts(source);
        let ex = synthetic_corpus(counts.total(), source);
        let a = split_dataset(source.name(), &ex, counts, 7).unwrap();
        let b = split_dataset(source.name(), &ex, counts, 7).unwrap();
        let ids = |s: &emostress::corpus::DatasetSplit| -> Vec<String> {
            Partition::ALL.iter().flat_map(|p| s.partition(*p).iter().map(|e| e.id.clone())).collect()
        };
        if a.counts() != want || ids(&a) != ids(&b) {
            bad.push(format!("{source}: {:?}", a.counts()));
        }
        if source == Source::Stress {
            for (f, want) in [(0.75, 1591), (0.5, 1060), (0.25, 530), (0.1, 212), (1.0, 2122)] {
                let plan = cfg.reduction.plan(f, a.train.len()).unwrap();
                let r = reduce_training_set(&a, &plan).unwrap();
                if r.train.len() != want || r.dev != a.dev || r.test != a.test {
                    bad.push(format!("fraction {f}: {}", r.train.len()));
                }
            }
        }
    }
    check(bad.is_empty(), if bad.is_empty() {
        "2122/716/715, 42409/5425/5426, 0/175/175 and 1591/1060/530/212 exact; splits deterministic".into()
    } else {
        bad.join("; ")
    })
}

// 8-9: user corpora ----------------------------------------------------------

fn data_config() -> Option<RunConfig> {
    let p = std::env::var_os("EMOSTRESS_DATA_CONFIG")?;
    Some(RunConfig::load(Path::new(&p)).expect("EMOSTRESS_DATA_CONFIG is a valid config"))
}

fn all_examples(s: &emostress::corpus::DatasetSplit) -> Vec<TextExample> {
    Partition::ALL.iter().flat_map(|p| s.partition(*p).to_vec()).collect()
}

fn corpus_counts() -> Outcome {
    let Some(cfg) = data_config() else {
        return Outcome::Skipped("set EMOSTRESS_DATA_CONFIG to the real corpora".into());
    };
    let c = Corpora::load(&cfg).unwrap();
    let s = corpus_stats(&all_examples(&c.stress));
    let m = corpus_stats(&all_examples(&c.minority));
    let e = all_examples(&c.emotion).len();
    check(
        s.n == published::STRESS_TOTAL
            && m.n == published::MINORITY_TOTAL
            && e == published::EMOTION_TOTAL
            && close(s.positive_pct, published::STRESS_POSITIVE_PCT, 0.1)
            && close(m.positive_pct, published::MINORITY_POSITIVE_PCT, 0.1),
        format!("{} ({:.1}%) / {} ({:.1}%) / {e}", s.n, s.positive_pct, m.n, m.positive_pct),
    )
}

fn taxonomy_counts() -> Outcome {
    let Some(cfg) = data_config() else {
        return Outcome::Skipped("set EMOSTRESS_DATA_CONFIG to the real corpora".into());
    };
    let c = Corpora::load(&cfg).unwrap();
    let v: Vec<EmotionVector> = all_examples(&c.emotion).iter().filter_map(|e| e.emotion_vector).collect();
    let r = validate_taxonomy(&v);
    let mism = r.mismatches();
    check(mism.is_empty(), format!(
        "{} of {} labels match{}",
        REFERENCE_COUNTS.len() - mism.len(),
        REFERENCE_COUNTS.len(),
        mism.iter().map(|(l, g, w)| format!("; {} {g} vs {w}", l.name())).collect::<String>()
    ))
}

// 10-13: finished full-scale studies ---------------------------------------

fn study_dir(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from)
}

fn grids(dir: &Path) -> BTreeMap<String, ResultsGrid> {
    serde_json::from_str(&std::fs::read_to_string(dir.join("grids.json")).unwrap()).unwrap()
}

fn cell(g: &ResultsGrid, arch: Architecture, enc: EncoderName) -> Option<f64> {
    g.get(arch.display_name(), enc.display_name()).map(|m| m.f1)
}

fn single_base_general() -> Outcome {
    let Some(dir) = study_dir("EMOSTRESS_PRIMARY_DIR") else {
        return Outcome::Skipped("set EMOSTRESS_PRIMARY_DIR to a finished primary study".into());
    };
    let g = grids(&dir);
    let s = cell(&g["stress_test"], Architecture::SingleTask, EncoderName::BaseGeneral);
    let m = cell(&g["minority_test"], Architecture::SingleTask, EncoderName::BaseGeneral);
    match (s, m) {
        (Some(s), Some(m)) => check(
            close(s, reference::SINGLE_BASE_GENERAL_STRESS_F1, 2.0) && close(m, reference::SINGLE_BASE_GENERAL_MINORITY_F1, 3.0),
            format!(
                "stress {s:.2} (ref {:.2}, delta {:+.2}); minority {m:.2} (ref {:.2}, delta {:+.2})",
                reference::SINGLE_BASE_GENERAL_STRESS_F1,
                s - reference::SINGLE_BASE_GENERAL_STRESS_F1,
                reference::SINGLE_BASE_GENERAL_MINORITY_F1,
                m - reference::SINGLE_BASE_GENERAL_MINORITY_F1
            ),
        ),
        _ => Outcome::Fail("cell missing from grids".into()),
    }
}

fn multi_robust_mental() -> Outcome {
    let Some(dir) = study_dir("EMOSTRESS_PRIMARY_DIR") else {
        return Outcome::Skipped("set EMOSTRESS_PRIMARY_DIR to a finished primary study".into());
    };
    let g = &grids(&dir)["minority_test"];
    match (
        cell(g, Architecture::Multi, EncoderName::RobustMental),
        cell(g, Architecture::SingleTask, EncoderName::RobustMental),
    ) {
        (Some(m), Some(s)) => check(
            close(m, reference::MULTI_ROBUST_MENTAL_MINORITY_F1, 3.0) && m > s,
            format!("multi {m:.2} (ref {:.2}, delta {:+.2}); single {s:.2}", reference::MULTI_ROBUST_MENTAL_MINORITY_F1, m - reference::MULTI_ROBUST_MENTAL_MINORITY_F1),
        ),
        _ => Outcome::Fail("cell missing from grids".into()),
    }
}

fn reduction_shape() -> Outcome {
    let Some(dir) = study_dir("EMOSTRESS_REDUCTION_DIR") else {
        return Outcome::Skipped("set EMOSTRESS_REDUCTION_DIR to a finished reduction study".into());
    };
    let csv = std::fs::read_to_string(dir.join("reduction.csv")).unwrap();
    let mut at_half: BTreeMap<(String, String), f64> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[2] == "0.50" {
            at_half.insert((f[0].to_string(), f[1].to_string()), f[4].parse().unwrap());
        }
    }
    let mut wins = 0;
    let mut parts = Vec::new();
    for enc in EncoderName::PRETRAINED {
        let s = at_half.get(&("single".into(), enc.key().into()));
        let m = at_half.get(&("multi".into(), enc.key().into()));
        if let (Some(s), Some(m)) = (s, m) {
            wins += usize::from(m >= s);
            parts.push(format!("{} multi {m:.2} vs single {s:.2}", enc.key()));
        }
    }
    check(wins >= 3, format!("{wins}/4 encoders: {}", parts.join(", ")))
}

fn labeler_and_divergence() -> Outcome {
    let Some(dir) = study_dir("EMOSTRESS_EMOTIONS_DIR") else {
        return Outcome::Skipped("set EMOSTRESS_EMOTIONS_DIR to a finished emotions study".into());
    };
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let r: DistributionReport = serde_json::from_value(m["report"].clone()).unwrap();
    check(
        close(r.labeler_test.f1, reference::LABELER_MACRO_F1, 3.0) && r.ordering_holds,
        format!(
            "labeler macro F1 {:.2} (ref {:.2}, delta {:+.2}); cross-corpus L1 {:.4} vs within {:?}",
            r.labeler_test.f1,
            reference::LABELER_MACRO_F1,
            r.labeler_test.f1 - reference::LABELER_MACRO_F1,
            r.cross_corpus_l1,
            r.within_corpus_l1
        ),
    )
}

fn main() {
    let criteria: [(usize, &str, Check); 13] = [
        (1, "loss correctness", loss_correctness),
        (2, "gradient routing", gradient_routing),
        (3, "fine-tune transfer", fine_tune_transfer),
        (4, "early stopping", early_stopping),
        (5, "overfit smoke", overfit),
        (6, "metrics", metrics),
        (7, "data plumbing", data_plumbing),
        (8, "corpus statistics", corpus_counts),
        (9, "taxonomy counts", taxonomy_counts),
        (10, "single-task base-general F1", single_base_general),
        (11, "multi robust-mental minority F1", multi_robust_mental),
        (12, "reduction study shape", reduction_shape),
        (13, "labeler F1 and divergence ordering", labeler_and_divergence),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if filter.is_some_and(|x| x != id) {
            continue;
        }
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match out {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skipped(d) => ("SKIPPED", d),
        };
        println!("criterion {id:>2} {tag:<7} {name}: {detail}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
