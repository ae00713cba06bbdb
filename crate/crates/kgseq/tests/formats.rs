use std::path::Path;

use kgseq::checkpoint::{Checkpoint, Kind};
use kgseq::config::{Mode, RunConfig};
use kgseq::io;
use kgseq::pipeline::{self, Data};
use kgseq::synth::{generate, SynthConfig};
use kgseq::Error;
use kgseq_core::encoder::Encoder;
use kgseq_core::kg::{ingest_triples, EntityId};

fn small_data() -> Data {
    let d = generate(&SynthConfig {
        clusters: 2,
        per_cluster: 4,
        relations: 3,
        valid: 2,
        test: 2,
        ..Default::default()
    })
    .unwrap();
    Data::from_texts(&d.train, &d.valid, &d.test, &d.features, 32).unwrap()
}

fn small_config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in ["d=8", "heads=2", "layers=1", "fusion_epochs=5", "epochs=1"] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.mode = mode;
    cfg
}

#[test]
fn three_line_fixture_counts() {
    let (t, v) = ingest_triples("A\tr1\tB\nB\tr2\tC\nC\tr1\tD\n").unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(v.num_entities(), 4);
    assert_eq!(v.num_forward_relations(), 2);
}

#[test]
fn malformed_triple_line_reports_line() {
    let err = ingest_triples("A\tr1\tB\nA\tr1\n").unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
}

#[test]
fn path_cache_round_trip() {
    let data = small_data();
    let cfg = small_config(Mode::NoImg);
    let paths = pipeline::mine(&data, &cfg).unwrap();
    let text = io::format_paths(&data.dataset.vocab, &paths);
    let back = io::parse_paths(Path::new("paths.txt"), &text, &data.dataset.vocab).unwrap();
    assert_eq!(back, paths);
}

#[test]
fn path_cache_rejects_short_rows() {
    let data = small_data();
    let err = io::parse_paths(Path::new("p"), "e000\tr0\te001 : r0,e001\n", &data.dataset.vocab).unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }), "{err}");
}

#[test]
fn trajectory_cache_round_trip() {
    let data = small_data();
    for mode in [Mode::NoImg, Mode::MkgRl] {
        let cfg = small_config(mode);
        let paths = pipeline::mine(&data, &cfg).unwrap();
        let table = mode
            .multimodal()
            .then(|| pipeline::fused_table(&data, &pipeline::pretrain(&data, &cfg).unwrap().0).unwrap());
        let trajs = pipeline::build_trajectories(&data, &paths, table.as_ref(), &cfg).unwrap();
        let widths = (3, 8, 3);
        let bytes = io::encode_trajectories(&trajs, widths, "src").unwrap();
        let (header, back) = io::decode_trajectories(Path::new("t"), &bytes).unwrap();
        assert_eq!(header.records, trajs.len());
        assert_eq!(header.with_state, mode.multimodal());
        assert_eq!(header.source, "src");
        assert_eq!(back, trajs);
    }
}

#[test]
fn trajectory_cache_checks_horizon() {
    let bytes = b"kgseq-trajectories 1\nhorizon 5\nwidths 3 8 3\nstate 0\nrecords 0\nsource x\nend\n";
    let err = io::decode_trajectories(Path::new("t"), bytes).unwrap_err();
    assert!(matches!(err, Error::Version(_)), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let data = small_data();
    let cfg = small_config(Mode::MkgRl);
    let (fusion, _) = pipeline::pretrain(&data, &cfg).unwrap();
    let table = pipeline::fused_table(&data, &fusion).unwrap();
    let enc = Encoder::new(cfg.encoder(data.dataset.vocab.size()).unwrap()).unwrap();

    let ck = Checkpoint::model(&cfg, &data.dataset.vocab, &enc, Some(&table), &data.registry).unwrap();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(Path::new("m"), &bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.encoder().unwrap().store, enc.store);
    assert_eq!(back.table().unwrap().unwrap(), table);
    let images = back.images().unwrap();
    for e in 0..data.dataset.vocab.num_entities() as u32 {
        assert_eq!(images.image(EntityId(e)), data.registry.image(EntityId(e)));
        assert_eq!(images.ocr(EntityId(e)), None);
    }

    let fk = Checkpoint::fusion(&cfg, &data.dataset.vocab, &fusion);
    let fback = Checkpoint::from_bytes(Path::new("f"), &fk.to_bytes()).unwrap();
    assert_eq!(fback.fusion_model().unwrap().store, fusion.store);
    assert!(matches!(fback.encoder(), Err(Error::Version(_))));
    assert_eq!(fback.kind, Kind::Fusion);
}

#[test]
fn checkpoint_vocab_mismatch_is_a_version_error() {
    let data = small_data();
    let cfg = small_config(Mode::NoImg);
    let enc = Encoder::new(cfg.encoder(data.dataset.vocab.size()).unwrap()).unwrap();
    let ck = Checkpoint::model(&cfg, &data.dataset.vocab, &enc, None, &data.registry).unwrap();
    let (_, other) = ingest_triples("x\tr0\ty\n").unwrap();
    assert!(matches!(ck.check_vocab(&other), Err(Error::Version(_))));
    assert!(ck.check_vocab(&data.dataset.vocab).is_ok());
}

#[test]
fn checkpoint_rejects_foreign_and_truncated_files() {
    assert!(matches!(
        Checkpoint::from_bytes(Path::new("x"), b"hello\nend\n"),
        Err(Error::Version(_))
    ));
    let data = small_data();
    let cfg = small_config(Mode::NoImg);
    let enc = Encoder::new(cfg.encoder(data.dataset.vocab.size()).unwrap()).unwrap();
    let bytes = Checkpoint::model(&cfg, &data.dataset.vocab, &enc, None, &data.registry).unwrap().to_bytes();
    let cut = &bytes[..bytes.len() - 8];
    assert!(matches!(
        Checkpoint::from_bytes(Path::new("x"), cut),
        Err(Error::Format { .. })
    ));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate(&SynthConfig::default()).unwrap();
    io::write_dataset(dir.path(), &gen).unwrap();
    let data = io::load_dataset(dir.path(), 32).unwrap();
    let direct = Data::from_texts(&gen.train, &gen.valid, &gen.test, &gen.features, 32).unwrap();
    assert_eq!(data.dataset, direct.dataset);
    assert_eq!(data.registry, direct.registry);
}
