use std::path::PathBuf;

use helix_core::backend::{
    read_trace, Backend, ExternalBackend, ReplayBackend, ReplayWriter, StepOutput, SyntheticBackend, SyntheticSpec,
};
use helix_core::manifold::{BuildMetadata, Manifold, RunningStats};
use helix_core::steering::{generate, FinishReason, GenerateOptions, SteeringConfig, SteeringMode};
use helix_core::Error;

fn record(spec: &SyntheticSpec, steps: usize) -> (Vec<StepOutput>, Vec<u8>) {
    let mut b = SyntheticBackend::new(spec.clone()).unwrap();
    let mut outs = vec![b.start("p").unwrap()];
    for i in 0..steps - 1 {
        outs.push(b.step((i % 5) as u32, 1.0).unwrap());
    }
    let mut w = ReplayWriter::new(Vec::new(), spec.vocab_size, spec.layer_ids.len()).unwrap();
    for o in &outs {
        w.write(o).unwrap();
    }
    (outs, w.finish().unwrap())
}

#[test]
fn replay_reproduces_recorded_steps() {
    let spec = SyntheticSpec::divergence_prone(1).with_seed(4);
    let (outs, bytes) = record(&spec, 50);
    let (parsed, err) = read_trace(&bytes);
    assert!(err.is_none());
    // values are stored as f32
    assert_eq!(parsed.len(), outs.len());
    for (p, o) in parsed.iter().zip(&outs) {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        assert_eq!(p.logits, narrow(&o.logits));
        for (id, h) in &o.hidden_states {
            assert_eq!(p.hidden_states[id], narrow(h));
        }
        assert_eq!(p.is_end, o.is_end);
    }

    let m = SyntheticBackend::build_manifold(&spec, 2_000, 1e-5, 0.1).unwrap();
    let opts = GenerateOptions {
        max_tokens: 100,
        ..Default::default()
    };
    let mut replay = ReplayBackend::from_bytes(&bytes).unwrap();
    assert_eq!(replay.vocab_size(), 64);
    assert_eq!(replay.layer_ids(), vec![4, 12, 20]);
    let t = generate(&mut replay, &m, "p", 1.0, &SteeringConfig::default(), &opts, 3, None).unwrap();
    // the recording runs out after 50 positions
    assert_eq!(t.tokens.len(), 50);
    assert_eq!(t.finish, FinishReason::EndOfSequence);
}

#[test]
fn truncated_replay_fails_mid_stream() {
    let spec = SyntheticSpec::divergence_prone(1);
    let (_, bytes) = record(&spec, 20);
    let cut = &bytes[..bytes.len() - 7];
    let (parsed, err) = read_trace(cut);
    assert_eq!(parsed.len(), 19);
    assert!(matches!(err, Some(Error::MalformedRecord { index: 19, .. })));

    let m = SyntheticBackend::build_manifold(&spec, 2_000, 1e-5, 0.1).unwrap();
    let mut replay = ReplayBackend::from_bytes(cut).unwrap();
    let opts = GenerateOptions {
        max_tokens: 100,
        mode: SteeringMode::ObserveOnly,
        ..Default::default()
    };
    let t = generate(&mut replay, &m, "p", 1.0, &SteeringConfig::default(), &opts, 3, None).unwrap();
    assert_eq!(t.finish, FinishReason::Error);
    assert_eq!(t.tokens.len(), 19);
    assert_eq!(t.records.len(), 19);
    assert!(t.error.unwrap().contains("19"));

    assert!(ReplayBackend::from_bytes(b"HLXT").is_err());
    assert!(ReplayBackend::from_bytes(b"nope and more bytes").is_err());
}

fn tiny_manifold() -> Manifold {
    let mut s = RunningStats::new();
    for i in 0..20 {
        let x = i as f64 / 20.0;
        s.push(&[x, 1.0 - x * x]).unwrap();
    }
    let layer = s.finalize(4, 1e-5).unwrap().with_d_ref(2.0).unwrap();
    Manifold::new(vec![layer], BuildMetadata::default()).unwrap()
}

fn script(name: &str, body: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    (dir, path)
}

#[test]
fn child_process_engine() {
    let (_dir, path) = script(
        "engine.sh",
        r#"n=0
while read -r line; do
  n=$((n+1))
  if [ "$n" -gt 6 ]; then
    echo '{"eos":true}'
  else
    echo '{"logits":[3.0,1.0,0.5,0.25],"hidden":{"4":[0.4,0.9]},"eos":false}'
  fi
done
"#,
    );
    let mut engine = ExternalBackend::spawn(&format!("sh {}", path.display())).unwrap();
    let opts = GenerateOptions {
        max_tokens: 50,
        ..Default::default()
    };
    let t = generate(&mut engine, &tiny_manifold(), "hello", 0.7, &SteeringConfig::default().with_layers(vec![4]), &opts, 1, None)
        .unwrap();
    assert_eq!(engine.vocab_size(), 4);
    assert_eq!(t.tokens.len(), 6);
    assert_eq!(t.finish, FinishReason::EndOfSequence);
    assert!(t.records.iter().all(|r| r.d_layers.contains_key(&4)));
}

#[test]
fn child_engine_errors() {
    let (_dir, path) = script("bad.sh", "read -r line\necho '{\"error\":\"model not loaded\"}'\n");
    let mut engine = ExternalBackend::spawn(&format!("sh {}", path.display())).unwrap();
    let e = engine.start("p").unwrap_err();
    assert!(e.to_string().contains("model not loaded"), "{e}");

    let mut gone = ExternalBackend::spawn("exit 0").unwrap();
    assert!(gone.start("p").is_err());

    let (_dir, path) = script("width.sh", "read -r l\necho '{\"logits\":[1,2,3]}'\nread -r l\necho '{\"logits\":[1,2]}'\n");
    let mut engine = ExternalBackend::spawn(&format!("sh {}", path.display())).unwrap();
    engine.start("p").unwrap();
    assert!(matches!(engine.step(0, 1.0), Err(Error::DimensionMismatch { expected: 3, actual: 2 })));
}
