//! End-to-end tests of the `labelmill` binary: each test lays out a corpus
//! and a config in a temp dir, runs real subcommand processes, and checks
//! files, exit codes, and rerun determinism.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelmill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("labelmill binary should spawn")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited via exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

fn read_json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&read(dir, name)).unwrap_or_else(|e| panic!("parsing {name}: {e}"))
}

fn jsonl_records(text: &str) -> Vec<Value> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("jsonl line parses"))
        .collect()
}

/// Three-topic corpus: `per_topic` docs each for billing, shipping, and
/// password, with distinctive filler so hashing embeddings separate cleanly.
fn write_topic_corpus(dir: &Path, per_topic: usize) {
    let topics = [
        ("billing", "alpha beacon crystal"),
        ("shipping", "omega quartz lantern"),
        ("password", "zenith marble copper"),
    ];
    let mut lines = String::new();
    for i in 0..per_topic {
        for (topic, filler) in topics {
            lines.push_str(&format!(
                "{{\"id\":\"{topic}-{i}\",\"text\":\"please help with my {topic} issue {filler}\"}}\n",
            ));
        }
    }
    fs::write(dir.join("corpus.jsonl"), lines).unwrap();
}

const BASE_CONFIG: &str = r#"
use_case = "Understand what users ask the support assistant to do"

[seeds]
master = 11

[corpus]
path = "corpus.jsonl"

[requirements]
target_count = 3
max_count = 10
max_words_per_name = 5

[llm]
backend = "rule"

[[llm.rules]]
keyword = "billing"
name = "Billing"
description = "Questions about invoices and charges."

[[llm.rules]]
keyword = "shipping"
name = "Shipping"
description = "Questions about parcel delivery."

[[llm.rules]]
keyword = "password"
name = "Account Access"
description = "Sign-in and credential help."

[embedding]
provider = "hashing"
dim = 64

[phase1]
batch_size = 50
trials = 3
selection_runs = 2
max_in_flight = 2
"#;

fn setup(per_topic: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    write_topic_corpus(dir.path(), per_topic);
    fs::write(dir.path().join("labelmill.toml"), BASE_CONFIG).unwrap();
    dir
}

/// The canonical two-label taxonomy file used by annotate/train tests.
fn write_taxonomy(dir: &Path, name: &str) {
    let text = "| index | name | description |\n| --- | --- | --- |\n\
                | 1 | Billing | Questions about invoices and charges. |\n\
                | 2 | Shipping | Questions about parcel delivery. |\n\
                | 3 | Account Access | Sign-in and credential help. |\n";
    fs::write(dir.join(name), text).unwrap();
}

// ------------------------------------------------------------- summarize

#[test]
fn summarize_writes_one_record_per_doc_and_reruns_identically() {
    let dir = setup(4); // 12 documents
    let out = run_in(dir.path(), &["summarize"]);
    assert_success(&out);

    let summaries = jsonl_records(&read(dir.path(), "out/summaries.jsonl"));
    assert_eq!(summaries.len(), 12, "one summary per retained document");
    for record in &summaries {
        assert!(record["doc_id"].as_str().is_some());
        assert!(record["text"].as_str().unwrap().contains("asks about"));
    }

    // Rerun into a second directory: payload bytes must match exactly.
    let out2 = run_in(dir.path(), &["summarize", "--out-dir", "out2"]);
    assert_success(&out2);
    assert_eq!(
        read(dir.path(), "out/summaries.jsonl"),
        read(dir.path(), "out2/summaries.jsonl")
    );
    assert_eq!(
        read(dir.path(), "out/summarize_manifest.jsonl"),
        read(dir.path(), "out2/summarize_manifest.jsonl")
    );
}

#[test]
fn summarize_with_missing_corpus_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("labelmill.toml"), BASE_CONFIG).unwrap();
    let out = run_in(dir.path(), &["summarize"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("does not exist"));
}

#[test]
fn config_without_seeds_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_topic_corpus(dir.path(), 2);
    let config = BASE_CONFIG.replace("[seeds]\nmaster = 11\n", "");
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["summarize"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("seeds"));
}

// -------------------------------------------------------------- taxonomy

#[test]
fn taxonomy_recovers_the_rule_topics() {
    let dir = setup(20); // 60 documents, 36/12/12 split
    let out = run_in(dir.path(), &["taxonomy"]);
    assert_success(&out);

    let taxonomy = read(dir.path(), "out/taxonomy.md");
    for name in ["Billing", "Shipping", "Account Access"] {
        assert!(taxonomy.contains(name), "missing label {name}:\n{taxonomy}");
    }
    let report = read_json(dir.path(), "out/taxonomy_report.json");
    assert_eq!(report["labels"], 3);
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);

    // Accounting: one generate per trial, plus cross-trial selection calls.
    let manifest = jsonl_records(&read(dir.path(), "out/taxonomy_manifest.jsonl"));
    let count = |t: &str| manifest.iter().filter(|r| r["template"] == t).count();
    assert_eq!(count("generate"), 3, "one generate per trial");
    assert_eq!(count("review"), 3, "one review per trial");
    assert_eq!(count("select"), 2, "selection_runs select calls");
    assert!(manifest.iter().all(|r| r["outcome"] == "ok"));

    // Rerun determinism over every taxonomy artifact.
    let out2 = run_in(dir.path(), &["taxonomy", "--out-dir", "out2"]);
    assert_success(&out2);
    for name in ["taxonomy.md", "taxonomy_manifest.jsonl", "taxonomy_report.json"] {
        assert_eq!(
            read(dir.path(), &format!("out/{name}")),
            read(dir.path(), &format!("out2/{name}")),
            "{name} differs between reruns"
        );
    }
}

#[test]
fn taxonomy_with_target_above_max_is_a_config_error() {
    let dir = setup(4);
    let config = BASE_CONFIG.replace("max_count = 10", "max_count = 2");
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["taxonomy"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("label counts"));
}

// -------------------------------------------------------------- annotate

#[test]
fn annotate_covers_every_matching_doc() {
    let dir = setup(10); // 30 documents
    write_taxonomy(dir.path(), "tax.md");
    let out = run_in(dir.path(), &["annotate", "--taxonomy", "tax.md"]);
    assert_success(&out);

    let coverage = read_json(dir.path(), "out/coverage.json");
    assert_eq!(coverage["coverage"], 1.0, "every document matches a rule");
    assert_eq!(coverage["documents"], 30);
    assert_eq!(coverage["flagged"], 0);

    let assignments = jsonl_records(&read(dir.path(), "out/assignments.jsonl"));
    assert_eq!(assignments.len(), 30);
    for a in &assignments {
        let id = a["doc_id"].as_str().unwrap();
        let name = a["primary_name"].as_str().unwrap();
        let expected = match id.split('-').next().unwrap() {
            "billing" => "Billing",
            "shipping" => "Shipping",
            _ => "Account Access",
        };
        assert_eq!(name, expected, "doc {id}");
        assert_eq!(a["source"], "llm");
    }
}

#[test]
fn annotate_mode_flag_controls_the_label_sets() {
    let dir = setup(2); // 6 documents
    write_taxonomy(dir.path(), "tax.md");
    // A scripted rater that always reports two applicable labels.
    let script = concat!(
        r#"{"template":"assign","attempt":1,"response":"<output>primary: (1, Billing)\nall: (1, Billing); (2, Shipping)</output>"}"#,
        "\n",
    );
    fs::write(dir.path().join("script.jsonl"), script).unwrap();
    let config = BASE_CONFIG.replace(
        "backend = \"rule\"",
        "backend = \"script\"\nscript_path = \"script.jsonl\"",
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();

    let out = run_in(dir.path(), &["annotate", "--taxonomy", "tax.md"]);
    assert_success(&out);
    let both = jsonl_records(&read(dir.path(), "out/assignments.jsonl"));
    assert!(both.iter().all(|a| a["all_indices"] == serde_json::json!([1, 2])));

    let out = run_in(
        dir.path(),
        &["annotate", "--taxonomy", "tax.md", "--mode", "primary_only", "--out-dir", "out_po"],
    );
    assert_success(&out);
    let primary_only = jsonl_records(&read(dir.path(), "out_po/assignments.jsonl"));
    assert!(primary_only.iter().all(|a| a["all_indices"] == serde_json::json!([1])));
}

#[test]
fn annotate_with_empty_taxonomy_file_errors() {
    let dir = setup(2);
    fs::write(dir.path().join("tax.md"), "").unwrap();
    let out = run_in(dir.path(), &["annotate", "--taxonomy", "tax.md"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn exhausted_retries_exit_with_code_4() {
    let dir = setup(2);
    // A script with no summarize entries: every attempt misses and the
    // whole stage exhausts.
    fs::write(dir.path().join("script.jsonl"), "").unwrap();
    let config = BASE_CONFIG.replace(
        "backend = \"rule\"",
        "backend = \"script\"\nscript_path = \"script.jsonl\"",
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["summarize"]);
    assert_eq!(exit_code(&out), 4, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("exhausted"));
}

// ----------------------------------------------------------------- train

/// Writes gold-style assignments mapping each topic prefix to a label.
fn write_assignments(dir: &Path, name: &str, per_topic: usize, rater: &str) {
    let mut lines = String::new();
    for i in 0..per_topic {
        for (topic, index, label) in [
            ("billing", 1, "Billing"),
            ("shipping", 2, "Shipping"),
            ("password", 3, "Account Access"),
        ] {
            lines.push_str(&format!(
                "{{\"doc_id\":\"{topic}-{i}\",\"primary_index\":{index},\"primary_name\":\"{label}\",\
                 \"all_indices\":[{index}],\"source\":\"human\",\"rater_id\":\"{rater}\"}}\n"
            ));
        }
    }
    fs::write(dir.join(name), lines).unwrap();
}

#[test]
fn train_reports_perfect_validation_accuracy_on_separable_classes() {
    let dir = setup(20); // 60 documents, three linearly separable classes
    write_assignments(dir.path(), "gold.jsonl", 20, "gold");
    let config = format!("{BASE_CONFIG}\n[train]\nassignments = \"gold.jsonl\"\nlambdas = [0.001]\n");
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();

    let out = run_in(dir.path(), &["train"]);
    assert_success(&out);
    let report = read_json(dir.path(), "out/train_report.json");
    assert_eq!(report["model"], "logit");
    assert_eq!(report["validation_accuracy"], 1.0);
    assert_eq!(report["test_accuracy"], 1.0);

    // The grid is reported with one accuracy per point.
    let trials = report["grid"]["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 1);
    assert!(trials[0]["validation_accuracy"].is_number());
    assert!(dir.path().join("out/model.bin").is_file());

    // The trained model labels the corpus.
    write_taxonomy(dir.path(), "tax.md");
    let config = format!(
        "{BASE_CONFIG}\n[train]\nassignments = \"gold.jsonl\"\n\n[predict]\ntaxonomy = \"tax.md\"\n"
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["predict"]);
    assert_success(&out);
    let predictions = jsonl_records(&read(dir.path(), "out/predictions.jsonl"));
    assert_eq!(predictions.len(), 60);
    let correct = predictions
        .iter()
        .filter(|p| {
            let topic = p["doc_id"].as_str().unwrap().split('-').next().unwrap();
            let expected = match topic {
                "billing" => "Billing",
                "shipping" => "Shipping",
                _ => "Account Access",
            };
            p["label_name"] == expected
        })
        .count();
    assert_eq!(correct, 60, "separable classes predict perfectly");
}

#[test]
fn train_without_embedding_section_is_actionable() {
    let dir = setup(4);
    write_assignments(dir.path(), "gold.jsonl", 4, "gold");
    let config = BASE_CONFIG.replace("[embedding]\nprovider = \"hashing\"\ndim = 64\n", "")
        + "\n[train]\nassignments = \"gold.jsonl\"\n";
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["train"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("[embedding]"), "stderr: {}", stderr(&out));
}

#[test]
fn multilabel_training_writes_per_label_grids() {
    let dir = setup(20);
    write_assignments(dir.path(), "gold.jsonl", 20, "gold");
    write_taxonomy(dir.path(), "tax.md");
    let config = format!(
        "{BASE_CONFIG}\n[train]\nmodel = \"multilabel-logit\"\nassignments = \"gold.jsonl\"\n\
         taxonomy = \"tax.md\"\nlambdas = [0.001]\n"
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["train"]);
    assert_success(&out);
    let report = read_json(dir.path(), "out/train_report.json");
    assert_eq!(report["model"], "multilabel-logit");
    let per_label = report["per_label_grid"].as_object().unwrap();
    assert_eq!(per_label.len(), 3, "one grid per taxonomy label");
    assert!(report["test_exact_match"].is_number());
}

// -------------------------------------------------------------- evaluate

#[test]
fn evaluate_identity_scores_all_ones_and_reports_agreement() {
    let dir = setup(10); // corpus present but untagged: no language section
    write_assignments(dir.path(), "gold.jsonl", 10, "gold");
    write_assignments(dir.path(), "pred.jsonl", 10, "model");
    write_assignments(dir.path(), "r1.jsonl", 10, "r1");
    write_assignments(dir.path(), "r2.jsonl", 10, "r2");
    write_assignments(dir.path(), "r3.jsonl", 10, "r3");
    let config = format!(
        "{BASE_CONFIG}\n[evaluate]\ngold = \"gold.jsonl\"\npred = \"pred.jsonl\"\n\
         raters = [\"r1.jsonl\", \"r2.jsonl\", \"r3.jsonl\"]\n"
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();

    let out = run_in(dir.path(), &["evaluate"]);
    assert_success(&out);

    let classification = read_json(dir.path(), "out/classification.json");
    assert_eq!(classification["primary"]["accuracy"], 1.0);
    assert_eq!(classification["primary"]["micro"]["f1"], 1.0);
    assert_eq!(classification["primary"]["macro_avg"]["f1"], 1.0);
    assert_eq!(classification["all_labels"]["exact_match_accuracy"], 1.0);
    assert!(classification.get("by_language").is_none());

    let confusion = read(dir.path(), "out/confusion.csv");
    assert!(confusion.starts_with("gold\\pred"));

    // Three identical raters agree perfectly.
    let agreement = read_json(dir.path(), "out/agreement.json");
    assert_eq!(agreement["n_raters"], 3);
    assert_eq!(agreement["fleiss_overall"], 1.0);
    let pairwise = agreement["cohen_pairwise"].as_object().unwrap();
    assert_eq!(pairwise.len(), 3);
    assert!(pairwise.values().all(|v| *v == serde_json::json!(1.0)));
    assert_eq!(agreement["avg_pairwise_cohen"], 1.0);
}

#[test]
fn evaluate_breaks_out_languages_when_tagged() {
    let dir = TempDir::new().unwrap();
    // Hand-built corpus with explicit language tags.
    let mut corpus = String::new();
    let mut assignments = String::new();
    for i in 0..6 {
        let lang = if i % 2 == 0 { "en" } else { "de" };
        corpus.push_str(&format!(
            "{{\"id\":\"d{i}\",\"text\":\"billing question {i}\",\"language\":\"{lang}\"}}\n"
        ));
        assignments.push_str(&format!(
            "{{\"doc_id\":\"d{i}\",\"primary_index\":1,\"primary_name\":\"Billing\",\
             \"all_indices\":[1],\"source\":\"human\",\"rater_id\":\"g\"}}\n"
        ));
    }
    fs::write(dir.path().join("corpus.jsonl"), corpus).unwrap();
    fs::write(dir.path().join("gold.jsonl"), &assignments).unwrap();
    fs::write(dir.path().join("pred.jsonl"), &assignments).unwrap();
    let config = format!(
        "{BASE_CONFIG}\n[evaluate]\ngold = \"gold.jsonl\"\npred = \"pred.jsonl\"\n"
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();

    let out = run_in(dir.path(), &["evaluate"]);
    assert_success(&out);
    let classification = read_json(dir.path(), "out/classification.json");
    let by_language = classification["by_language"].as_object().unwrap();
    let langs: BTreeSet<&str> = by_language.keys().map(|s| s.as_str()).collect();
    assert_eq!(langs, BTreeSet::from(["de", "en"]));
    assert_eq!(by_language["en"]["accuracy"], 1.0);
    assert_eq!(by_language["en"]["n_items"], 3);
}

#[test]
fn evaluate_without_inputs_is_a_config_error() {
    let dir = setup(2);
    let out = run_in(dir.path(), &["evaluate"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("evaluate"));
}

// ------------------------------------------------------- cluster-baseline

#[test]
fn cluster_baseline_separates_two_blobs() {
    let dir = TempDir::new().unwrap();
    // Two textual blobs with disjoint vocabulary; hashing embeddings give
    // each blob a tight cluster.
    let mut corpus = String::new();
    for i in 0..20 {
        corpus.push_str(&format!(
            "{{\"id\":\"a{i}\",\"text\":\"billing invoice charge alpha beacon crystal\"}}\n"
        ));
        corpus.push_str(&format!(
            "{{\"id\":\"b{i}\",\"text\":\"shipping parcel delivery omega quartz lantern\"}}\n"
        ));
    }
    fs::write(dir.path().join("corpus.jsonl"), corpus).unwrap();
    let config = format!("{BASE_CONFIG}\n[cluster]\nk = 2\ntrials = 3\n");
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();

    let out = run_in(dir.path(), &["cluster-baseline"]);
    assert_success(&out);
    let report = read_json(dir.path(), "out/cluster_report.json");
    assert_eq!(report["k"], 2);
    assert!(
        report["validation_silhouette"].as_f64().unwrap() > 0.8,
        "silhouette: {}",
        report["validation_silhouette"]
    );
    let trials = report["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 3, "one record per seeded restart");
    for trial in trials {
        assert!(trial["validation_silhouette"].is_number());
        assert!(trial["seed"].is_number());
    }
    assert_eq!(report["fallback_clusters"].as_array().unwrap().len(), 0);

    // The naming prompt sees mostly billing text in one cluster and mostly
    // shipping text in the other.
    let taxonomy = read(dir.path(), "out/cluster_taxonomy.md");
    assert!(taxonomy.contains("Billing"), "taxonomy:\n{taxonomy}");
    assert!(taxonomy.contains("Shipping"), "taxonomy:\n{taxonomy}");

    // The persisted model drives `predict` with cluster output.
    let config = format!(
        "{BASE_CONFIG}\n[predict]\nmodel_path = \"out/cluster_model.bin\"\n"
    );
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["predict"]);
    assert_success(&out);
    let predictions = jsonl_records(&read(dir.path(), "out/predictions.jsonl"));
    assert_eq!(predictions.len(), 40);
    assert!(predictions.iter().all(|p| p["cluster"].is_number()));
}

#[test]
fn cluster_k_above_corpus_size_errors() {
    let dir = setup(4);
    let config = format!("{BASE_CONFIG}\n[cluster]\nk = 500\n");
    fs::write(dir.path().join("labelmill.toml"), config).unwrap();
    let out = run_in(dir.path(), &["cluster-baseline"]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("clustering"), "stderr: {}", stderr(&out));
}
