use std::fs;

use mixq::evoselect::{select_greedy, FitnessEval};
use mixq::io::{Dataset, ModelDir, MANIFEST};
use mixq::layout::{apply_layout, plan_layout};
use mixq::netsim::synth::{generate, SynthConfig};
use mixq::netsim::{prepare_network, Executor, NetworkGraph, PrecisionMode, PrepareConfig, Selection};
use mixq::scoring::{score_network, ScoreTable};
use mixq::{Error, Schedule};

fn laid_out(cfg: &SynthConfig) -> ModelDir {
    let m = generate(cfg).unwrap();
    let mut net = prepare_network(&m.net, &m.calib, &PrepareConfig::default(), Schedule::Parallel).unwrap();
    let counts = net.selectable_group_counts();
    let scores = ScoreTable::from_scores(&score_network(&net).unwrap(), &counts).unwrap();
    let mut base = None;
    for r in [0.25, 0.5, 1.0] {
        let c = select_greedy(&scores, r, base.as_ref()).unwrap();
        base = Some(c.flags.clone());
        net.selections.push(Selection { ratio: r, flags: c.flags });
    }
    // Greedy picks are scattered, so the layout really permutes.
    let plan = plan_layout(&net, &net.selections).unwrap();
    assert!(plan.perms.iter().any(|p| !p.is_identity()));
    let net = apply_layout(&net, &plan).unwrap();
    let mut dir = ModelDir::new(net);
    dir.datasets.insert("eval".into(), Dataset { samples: m.eval, labels: Some(m.eval_labels) });
    dir
}

fn logits(net: &NetworkGraph, dir: &ModelDir, mode: PrecisionMode) -> Vec<Vec<u32>> {
    let xs = &dir.dataset("eval").unwrap().samples[..16];
    Executor::new(net)
        .unwrap()
        .run_batch(xs, mode, Schedule::Parallel)
        .unwrap()
        .iter()
        .map(|y| y.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn laid_out_model_round_trips() {
    for cfg in [SynthConfig::mlp(2), SynthConfig::conv(2)] {
        let dir = laid_out(&cfg);
        let tmp = tempfile::tempdir().unwrap();
        dir.save(tmp.path()).unwrap();
        let back = ModelDir::load(tmp.path()).unwrap();
        assert_eq!(back.net, dir.net);
        assert_eq!(back.dataset("eval").unwrap(), dir.dataset("eval").unwrap());
        for mode in [PrecisionMode::Int8, PrecisionMode::Mixed(0.5), PrecisionMode::Mixed(1.0)] {
            assert_eq!(logits(&back.net, &back, mode), logits(&dir.net, &dir, mode));
        }
        // Saving again is byte-identical.
        let tmp2 = tempfile::tempdir().unwrap();
        back.save(tmp2.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(fs::read(tmp.path().join(&n)).unwrap(), fs::read(tmp2.path().join(&n)).unwrap(), "{n:?}");
        }
    }
}

#[test]
fn manifest_has_layout_boundaries_and_lowering() {
    let dir = laid_out(&SynthConfig::mlp(2));
    let tmp = tempfile::tempdir().unwrap();
    dir.save(tmp.path()).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join(MANIFEST)).unwrap()).unwrap();
    for key in ["layout", "ratio_boundaries", "bit_lowering"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    assert_eq!(m["ratio_boundaries"].as_array().unwrap().len(), 3);
}

#[test]
fn fitness_survives_round_trip() {
    let dir = laid_out(&SynthConfig::mlp(7));
    let tmp = tempfile::tempdir().unwrap();
    dir.save(tmp.path()).unwrap();
    let back = ModelDir::load(tmp.path()).unwrap();
    let xs = &back.dataset("eval").unwrap().samples[..8];
    let a = FitnessEval::new(&dir.net, xs, Schedule::Sequential).unwrap();
    let b = FitnessEval::new(&back.net, xs, Schedule::Sequential).unwrap();
    let all: Vec<Vec<bool>> = a.group_counts().iter().map(|&n| vec![true; n]).collect();
    assert_eq!(a.fitness(&all, Schedule::Sequential).unwrap(), b.fitness(&all, Schedule::Sequential).unwrap());
}

#[test]
fn missing_and_truncated_tensors_are_reported() {
    let dir = laid_out(&SynthConfig::mlp(1));
    let tmp = tempfile::tempdir().unwrap();
    dir.save(tmp.path()).unwrap();

    let i8bin = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "i8bin"))
        .unwrap();
    let saved = fs::read(&i8bin).unwrap();
    fs::remove_file(&i8bin).unwrap();
    assert!(matches!(ModelDir::load(tmp.path()), Err(Error::MissingArtifact { .. })));

    fs::write(&i8bin, &saved[..saved.len() - 1]).unwrap();
    assert!(matches!(ModelDir::load(tmp.path()), Err(Error::Manifest(_))));

    fs::write(&i8bin, &saved).unwrap();
    ModelDir::load(tmp.path()).unwrap();

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(ModelDir::load(empty.path()), Err(Error::MissingArtifact { .. })));
}
