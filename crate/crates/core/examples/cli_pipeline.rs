//! The command-line pipeline driven in-process, from raw documents to a
//! nearest-neighbour query.

use verba::{cli, jsonl, synth};

fn run(args: &[&str]) {
    let mut argv = vec!["verba"];
    argv.extend_from_slice(args);
    assert_eq!(cli::run(&argv), 0, "verba {}", args.join(" "));
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let docs = synth::documents(1, 6, 8);
    jsonl::write(p("docs.jsonl"), &docs).unwrap();

    run(&["tokenize", "--in", &p("docs.jsonl"), "--out", &p("corpus.tok")]);
    run(&["learn-vocab", "--in", &p("corpus.tok"), "--out", &p("vocab.txt"), "--size", "500", "--min-frequency", "1"]);
    run(&["make-examples", "--in", &p("corpus.tok"), "--vocab", &p("vocab.txt"), "--out", &p("ex.jsonl"), "--seq-len", "64"]);
    run(&[
        "pretrain", "--vocab", &p("vocab.txt"), "--examples", &p("ex.jsonl"), "--out", &p("model.ckpt"),
        "--model-size", "tiny", "--steps", "20", "--batch-size", "8",
    ]);
    run(&["index-build", "--checkpoint", &p("model.ckpt"), "--vocab", &p("vocab.txt"), "--in", &p("docs.jsonl"), "--out", &p("index.plnn")]);
    run(&[
        "index-query", "--index", &p("index.plnn"), "--checkpoint", &p("model.ckpt"), "--vocab", &p("vocab.txt"),
        "--text", "Audentes fortuna iuvat", "--word", "1", "--k", "5", "--corpus", &p("docs.jsonl"), "--out", &p("hits.jsonl"),
    ]);
}
