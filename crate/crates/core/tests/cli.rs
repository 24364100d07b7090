use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nip_core::eval::evaluate_hashes;
use nip_core::pipeline::FittedHasher;
use nip_core::{DescriptorSet, EvalOptions, HashCodes, OrbitStore};

fn nip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nip"))
        .args(["--threads", "2"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nip(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--n-clusters",
            "12",
            "--shape",
            "4,2,16,2,2",
            "--noise",
            "0.5",
            "--out",
            "o.nipo",
            "--gt-out",
            "gt.tsv",
        ],
    );
}

#[test]
fn full_pipeline_with_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    assert!(ok(d, &["validate", "o.nipo"]).contains("OK"));
    ok(
        d,
        &[
            "pool",
            "--store",
            "o.nipo",
            "--l2-normalize",
            "--out",
            "desc.nipd",
        ],
    );
    let descs = DescriptorSet::read(d.join("desc.nipd")).unwrap();
    assert_eq!(descs.len(), 48);
    assert_eq!(descs.dim().unwrap(), 16);
    assert_eq!(descs.metadata.get("sequence"), Some("A_S,S_T,M_R"));
    assert!(descs.metadata.get("input.store.sha256").is_some());

    ok(
        d,
        &[
            "fit-pca",
            "--descriptors",
            "desc.nipd",
            "--out-dim",
            "8",
            "--out",
            "pca.nipp",
            "--apply-out",
            "pca.nipd",
        ],
    );
    assert_eq!(
        DescriptorSet::read(d.join("pca.nipd"))
            .unwrap()
            .dim()
            .unwrap(),
        8
    );

    let gt = nip_core::groundtruth::load_ground_truth(d.join("gt.tsv")).unwrap();
    for (method, bits) in [
        ("rbmh", "16"),
        ("rbm", "16"),
        ("lsh", "16"),
        ("pcahash", "8"),
        ("itq", "8"),
        ("threshold", "1"),
    ] {
        let model = format!("{method}.model");
        let codes = format!("{method}.niph");
        ok(
            d,
            &[
                "fit-hash",
                "--descriptors",
                "desc.nipd",
                "--method",
                method,
                "--bits",
                bits,
                "--epochs",
                "5",
                "--batch-size",
                "8",
                "--out",
                &model,
            ],
        );
        let (fitted, meta) = FittedHasher::read(d.join(&model)).unwrap();
        assert_eq!(meta.get("method"), Some(method));
        ok(
            d,
            &[
                "hash",
                "--model",
                &model,
                "--descriptors",
                "desc.nipd",
                "--out",
                &codes,
            ],
        );
        let hashes = HashCodes::read(d.join(&codes)).unwrap();
        assert_eq!(hashes.len(), 48);
        assert_eq!(hashes.n_bits().unwrap(), fitted.n_bits());

        let stem = format!("{method}_report");
        let stdout = ok(
            d,
            &["eval", "--db", &codes, "--gt", "gt.tsv", "--out", &stem],
        );
        assert!(stdout.contains("mAP"), "{stdout}");
        let kv = fs::read_to_string(d.join(format!("{stem}.kv"))).unwrap();
        let expected = evaluate_hashes(&hashes.hashes, &gt, &EvalOptions::default())
            .unwrap()
            .map;
        let line = kv.lines().find(|l| l.starts_with("map=")).unwrap();
        let reported: f64 = line["map=".len()..].parse().unwrap();
        assert_eq!(reported, expected, "{method}");
        assert!(d.join(format!("{stem}.tsv")).exists());
        assert!(d.join(format!("{stem}.bits.csv")).exists());
    }

    ok(
        d,
        &["eval", "--db", "desc.nipd", "--gt", "gt.tsv", "--out", "l2"],
    );
    let stats = ok(d, &["stats", "--hashes", "itq.niph", "--out", "bits.csv"]);
    assert!(!stats.is_empty());
    let csv = fs::read_to_string(d.join("bits.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("bit,mean"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn convert_reads_raw_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let values: Vec<f32> = (0..8).map(|i| i as f32).collect();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(d.join("a.bin"), &bytes).unwrap();
    fs::write(d.join("b.bin"), &bytes).unwrap();
    fs::write(d.join("m.tsv"), "# id\tpath\na\ta.bin\nb\tb.bin\n").unwrap();
    ok(
        d,
        &[
            "convert",
            "--manifest",
            "m.tsv",
            "--shape",
            "2,2,2,1,1",
            "--out",
            "s.nipo",
        ],
    );
    let store = OrbitStore::open(d.join("s.nipo")).unwrap();
    assert_eq!(store.ids(), ["a", "b"]);
    assert_eq!(store.read_orbit("b").unwrap().data(), values.as_slice());

    fs::write(d.join("short.bin"), &bytes[..12]).unwrap();
    fs::write(d.join("bad.tsv"), "a\tshort.bin\n").unwrap();
    let out = nip(
        d,
        &[
            "convert",
            "--manifest",
            "bad.tsv",
            "--shape",
            "2,2,2,1,1",
            "--out",
            "bad.nipo",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("short.bin"));
    assert!(!d.join("bad.nipo").exists());
}

#[test]
fn failures_exit_nonzero_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);

    let out = nip(d, &["pool", "--store", "missing.nipo", "--out", "x.nipd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.nipo"));
    assert!(!d.join("x.nipd").exists());

    let out = nip(
        d,
        &[
            "pool",
            "--store",
            "o.nipo",
            "--sequence",
            "A_R,A_R",
            "--out",
            "x.nipd",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("x.nipd").exists());

    let out = nip(
        d,
        &[
            "synth",
            "--shape",
            "4,0,1,1,1",
            "--out",
            "y.nipo",
            "--gt-out",
            "y.tsv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("y.nipo").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_nip"))
        .args(["--threads", "0", "validate", "o.nipo"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = nip(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(nip(d, &["--help"]).status.code(), Some(0));

    // truncated store
    let bytes = fs::read(d.join("o.nipo")).unwrap();
    fs::write(d.join("cut.nipo"), &bytes[..bytes.len() / 2]).unwrap();
    let out = nip(d, &["validate", "cut.nipo"]);
    assert_eq!(out.status.code(), Some(1));

    // more bits than descriptor dimensions
    ok(d, &["pool", "--store", "o.nipo", "--out", "desc.nipd"]);
    let out = nip(
        d,
        &[
            "fit-hash",
            "--descriptors",
            "desc.nipd",
            "--method",
            "itq",
            "--bits",
            "64",
            "--out",
            "big.nipb",
        ],
    );
    assert_ne!(out.status.code(), Some(0));
    assert!(!d.join("big.nipb").exists());

    let out = nip(d, &["eval", "--db", "desc.nipd", "--gt", "nope.tsv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_changes_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (seed, name) in [("1", "a.nipo"), ("2", "b.nipo")] {
        ok(
            d,
            &[
                "--seed",
                seed,
                "synth",
                "--n-clusters",
                "3",
                "--shape",
                "2,1,2,1,1",
                "--out",
                name,
                "--gt-out",
                "gt.tsv",
            ],
        );
    }
    assert_ne!(
        fs::read(d.join("a.nipo")).unwrap(),
        fs::read(d.join("b.nipo")).unwrap()
    );
}
