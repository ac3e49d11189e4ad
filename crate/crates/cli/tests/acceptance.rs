use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereoprobe::apx::{self, ApxDirection, BiasScoreTable, Matrix, Metric, PplTable, PplTableBuilder};
use stereoprobe::corpus::{
    default_templates, expand_sentences, validation_subset_with_map, write_corpus_jsonl, Descriptor,
    DescriptorSource, Gender, GroupKey, NameEntry, NameSet, Sentence,
};
use stereoprobe::evalstats::{
    argmin_accuracy, mean_reciprocal_rank, surface_stereotypes, Candidates, GoldLabel, SurfaceParams,
};
use stereoprobe::genharness::{CharacterProfile, MockChatBackend};
use stereoprobe::profileanalysis::{
    feature_elimination, jsd, run_tasks, Distribution, FeatureGroup, LabeledProfiles, SvmParams, Task,
};
use stereoprobe::scoring::{score_corpus, MockBackend, ScoreCache, ScoreOptions, ScoreOutcome};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn ethnicity(e: usize) -> String {
    format!("Eth{e:02}")
}

fn synthetic_names(ethnicities: usize, per_group: usize) -> Vec<NameEntry> {
    let mut out = Vec::new();
    for e in 0..ethnicities {
        for g in [Gender::F, Gender::M] {
            for k in 0..per_group {
                out.push(NameEntry::new(format!("N{e:02}{g}{k:03}"), ethnicity(e), g).unwrap());
            }
        }
    }
    out
}

fn descriptor(text: String, gold: Option<String>) -> Descriptor {
    Descriptor {
        text,
        source: DescriptorSource::Other,
        axis: None,
        gold_group: gold,
    }
}

fn corpus_counts() -> Check {
    let start = Instant::now();
    let names = synthetic_names(20, 10);
    let descriptors: Vec<Descriptor> = (0..730)
        .map(|j| {
            let gold = (j < 44).then(|| format!("Cat{}", j % 4));
            descriptor(format!("desc{j:03}"), gold)
        })
        .collect();
    let templates = default_templates();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let mut w = BufWriter::new(std::fs::File::create(dir.path().join("corpus.jsonl")).unwrap());
    let full = write_corpus_jsonl(&mut w, expand_sentences(&names, &descriptors, &templates).unwrap()).unwrap();
    w.flush().unwrap();

    let category_map: BTreeMap<String, String> = (0..14).map(|e| (ethnicity(e), format!("Cat{}", e % 4))).collect();
    let set = NameSet::new(names.clone());
    let sub = validation_subset_with_map(&set, &descriptors, category_map).map_err(|e| e.to_string())?;
    let mut w = BufWriter::new(std::fs::File::create(dir.path().join("validation.jsonl")).unwrap());
    let val = write_corpus_jsonl(&mut w, expand_sentences(sub.names.names(), &sub.descriptors, &templates).unwrap())
        .unwrap();
    w.flush().unwrap();
    let elapsed = start.elapsed();
    let rss = peak_rss_mb();

    ensure(full == 876_000, || format!("corpus has {full} sentences"))?;
    ensure(val == 36_960, || format!("validation has {val} sentences"))?;
    ensure(sub.names.len() == 280 && sub.descriptors.len() == 44, || {
        format!("validation subset {} names x {} descriptors", sub.names.len(), sub.descriptors.len())
    })?;
    within(elapsed, Duration::from_secs(60))?;
    let rss = rss.ok_or("peak memory unavailable")?;
    ensure(rss < 500.0, || format!("peak memory {rss:.0} MB"))?;
    Ok(format!("{full} + {val} sentences in {elapsed:.1?}, peak {rss:.0} MB"))
}

fn random_matrix(rng: &mut ChaCha8Rng, g: usize, d: usize, holes: bool) -> Matrix {
    (0..g)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if holes && rng.random_bool(0.05) {
                        None
                    } else {
                        Some(1.0 + rng.random::<f64>() * 200.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn naive_bias(ms: &[Matrix], metric: Metric) -> Vec<Vec<Option<f64>>> {
    let g = ms[0].len();
    let d = ms[0][0].len();
    let mut out = vec![vec![Some(0.0); d]; g];
    for m in ms {
        let mut cells = Vec::new();
        for i in 0..g {
            for j in 0..d {
                if let Some(v) = m[i][j] {
                    cells.push((i, j, v));
                }
            }
        }
        let total = cells.iter().map(|c| c.2).sum::<f64>() / cells.len() as f64;
        let row_mean = |i: usize| {
            let r: Vec<f64> = cells.iter().filter(|c| c.0 == i).map(|c| c.2).collect();
            r.iter().sum::<f64>() / r.len() as f64
        };
        let adjusted: Vec<(usize, usize, f64)> = cells
            .iter()
            .map(|&(i, j, v)| {
                let a = match metric {
                    Metric::Ppl => v,
                    Metric::Apx(ApxDirection::AsPrinted) => v * row_mean(i) / total,
                    Metric::Apx(ApxDirection::Inverse) => v * total / row_mean(i),
                };
                (i, j, a)
            })
            .collect();
        let grand = adjusted.iter().map(|c| c.2).sum::<f64>() / adjusted.len() as f64;
        for i in 0..g {
            for j in 0..d {
                let v = adjusted.iter().find(|c| c.0 == i && c.1 == j).map(|c| c.2 / grand);
                out[i][j] = match (out[i][j], v) {
                    (Some(a), Some(v)) => Some(a + v / ms.len() as f64),
                    _ => None,
                };
            }
        }
    }
    out
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut compared = 0usize;
    for case in 0..200 {
        let g = rng.random_range(2..12);
        let d = rng.random_range(2..15);
        let t = rng.random_range(1..4);
        let ms: Vec<Matrix> = (0..t).map(|_| random_matrix(&mut rng, g, d, case % 2 == 1)).collect();
        for m in &ms {
            let cells: Vec<f64> = m.iter().flatten().flatten().copied().collect();
            let total = cells.iter().sum::<f64>() / cells.len() as f64;
            ensure(rel_close(apx::total_mean(m).unwrap(), total), || format!("case {case}: total mean"))?;
            for (i, row) in m.iter().enumerate() {
                let vals: Vec<f64> = row.iter().flatten().copied().collect();
                if vals.is_empty() {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                ensure(rel_close(apx::group_mean(m, i).unwrap(), mean), || format!("case {case}: group mean {i}"))?;
                for dir in [ApxDirection::AsPrinted, ApxDirection::Inverse] {
                    let adj = apx::apx_adjust(m, dir).unwrap();
                    for (j, c) in row.iter().enumerate() {
                        let want = c.map(|v| match dir {
                            ApxDirection::AsPrinted => v * mean / total,
                            ApxDirection::Inverse => v * total / mean,
                        });
                        match (adj[i][j], want) {
                            (Some(a), Some(b)) if rel_close(a, b) => compared += 1,
                            (None, None) => {}
                            other => return Err(format!("case {case}: apx ({i},{j}) {other:?}")),
                        }
                    }
                }
            }
        }
        let groups = (0..g).map(|i| GroupKey::new(ethnicity(i), Gender::F)).collect();
        let descs = (0..d).map(|j| format!("d{j}")).collect();
        let table = PplTable::new(groups, descs, (0..t).collect(), ms.clone()).unwrap();
        for metric in [Metric::Ppl, Metric::Apx(ApxDirection::AsPrinted), Metric::Apx(ApxDirection::Inverse)] {
            let got = apx::bias_scores(&table, metric).unwrap();
            let want = naive_bias(&ms, metric);
            for (gr, wr) in got.scores.iter().zip(&want) {
                for (a, b) in gr.iter().zip(wr) {
                    match (a, b) {
                        (Some(a), Some(b)) if rel_close(*a, *b) => compared += 1,
                        (None, None) => {}
                        other => return Err(format!("case {case}: {} score {other:?}", metric.label())),
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("200 tables, {compared} values within 1e-9 in {elapsed:.1?}"))
}

struct PlantedRun {
    ppl: BiasScoreTable,
    as_printed: BiasScoreTable,
    inverse: BiasScoreTable,
    gold: Vec<GoldLabel>,
}

const PLANTED_PAIRS: usize = 25;
const PAIR_FACTOR: f64 = 0.7;

fn planted_run(seed: u64, group_offsets: bool) -> PlantedRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = synthetic_names(20, 10);
    let groups: Vec<GroupKey> = NameSet::new(names.clone()).groups().iter().map(|g| g.key()).collect();
    let descriptors: Vec<Descriptor> = (0..PLANTED_PAIRS).map(|j| descriptor(format!("trait{j:02}"), None)).collect();
    let templates = default_templates();

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let mut backend = MockBackend::new("planted", seed);
    let mut gold = Vec::new();
    for (j, d) in descriptors.iter().enumerate() {
        let g = &groups[order[j]];
        backend = backend.with_pair_factor(g.clone(), d.text.clone(), PAIR_FACTOR);
        gold.push(GoldLabel {
            descriptor: d.text.clone(),
            target: g.label(),
        });
    }
    if group_offsets {
        order.shuffle(&mut rng);
        for (k, &i) in order.iter().take(20).enumerate() {
            let factor = if k % 2 == 0 { 0.4 } else { 2.5 };
            backend = backend.with_group_factor(groups[i].clone(), factor);
        }
    }

    let sentences: Vec<Sentence> = expand_sentences(&names, &descriptors, &templates).unwrap().collect();
    let mut ppl = Vec::with_capacity(sentences.len());
    score_corpus(&backend, sentences.iter().cloned(), &ScoreCache::in_memory(), &ScoreOptions::default(), |o| {
        ppl.push(match o {
            ScoreOutcome::Scored { scored, .. } => Some(scored.ppl),
            ScoreOutcome::Failed { .. } => None,
        });
        Ok(())
    })
    .unwrap();
    let mut builder = PplTableBuilder::new(
        groups,
        descriptors.iter().map(|d| d.text.clone()).collect(),
        templates.iter().map(|t| t.id).collect(),
    );
    for (s, p) in sentences.iter().zip(ppl) {
        builder.add(s, p);
    }
    let (table, _) = builder.build();
    PlantedRun {
        ppl: apx::bias_scores(&table, Metric::Ppl).unwrap(),
        as_printed: apx::bias_scores(&table, Metric::Apx(ApxDirection::AsPrinted)).unwrap(),
        inverse: apx::bias_scores(&table, Metric::Apx(ApxDirection::Inverse)).unwrap(),
        gold,
    }
}

fn planted_recovery() -> Check {
    let start = Instant::now();
    for seed in 0..10 {
        let run = planted_run(seed, false);
        let cands = Candidates::groups(&run.as_printed);
        let acc = argmin_accuracy(&run.as_printed, &run.gold, &cands).unwrap();
        let mrr = mean_reciprocal_rank(&run.as_printed, &run.gold, &cands).unwrap();
        ensure(acc == 1.0 && mrr == 1.0, || format!("seed {seed}: accuracy {acc}, mrr {mrr}"))?;
        let surfaced: BTreeSet<(String, String)> = surface_stereotypes(&run.as_printed, &SurfaceParams::default())
            .unwrap()
            .into_iter()
            .map(|s| (s.descriptor, s.group))
            .collect();
        let planted: BTreeSet<(String, String)> =
            run.gold.iter().map(|g| (g.descriptor.clone(), g.target.clone())).collect();
        let fp = surfaced.difference(&planted).count();
        let fn_ = planted.difference(&surfaced).count();
        ensure(fp == 0 && fn_ == 0, || format!("seed {seed}: {fp} false positives, {fn_} false negatives"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "{PLANTED_PAIRS} pairs x 10 seeds: accuracy 100%, MRR 1.0, surfaced set exact, {elapsed:.1?}"
    ))
}

fn offset_direction() -> Check {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..10 {
        let run = planted_run(100 + seed, true);
        let cands = Candidates::groups(&run.ppl);
        let acc = |t: &BiasScoreTable| argmin_accuracy(t, &run.gold, &cands).unwrap();
        let (ppl, printed, inverse) = (acc(&run.ppl), acc(&run.as_printed), acc(&run.inverse));
        lines.push(format!("seed {seed}: ppl {ppl:.2} as_printed {printed:.2} inverse {inverse:.2}"));
        if inverse < ppl {
            failures.push(format!("seed {seed}: inverse {inverse:.2} < ppl {ppl:.2}"));
        }
        if 1.0 - ppl < 0.30 {
            failures.push(format!("seed {seed}: ppl misclassifies only {:.0}%", (1.0 - ppl) * 100.0));
        }
    }
    for l in &lines {
        println!("    {l}");
    }
    if failures.is_empty() {
        Ok("inverse >= ppl on every seed; ppl misclassifies >= 30% under 2.5x offsets".into())
    } else {
        Err(failures.join("; "))
    }
}

fn mock_profiles(seed: u64, per_group: usize, repeats: u32, signal: bool) -> LabeledProfiles {
    let names = synthetic_names(20, per_group);
    let groups: HashMap<String, GroupKey> = names.iter().map(|n| (n.given_name.clone(), n.group_key())).collect();
    let mut chat = MockChatBackend::new("chat", seed);
    if signal {
        chat = chat.with_group_signal("occupation", groups);
    }
    let mut data = LabeledProfiles {
        profiles: Vec::new(),
        groups: Vec::new(),
    };
    for n in &names {
        for r in 0..repeats {
            let p: CharacterProfile = chat.profile_for(&n.given_name, r);
            data.profiles.push(p);
            data.groups.push(n.group_key());
        }
    }
    data
}

fn chance_levels() -> Check {
    let expected: [(Task, f64); 3] = [(Task::GenderEthnicity, 0.025), (Task::Ethnicity, 0.05), (Task::Gender, 0.5)];
    let tasks: Vec<Task> = expected.iter().map(|e| e.0).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut data = mock_profiles(seed, 30, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        data.groups.shuffle(&mut rng);
        let split = data.split(0.7, seed).unwrap();
        let results = run_tasks(&data, &split, &FeatureGroup::ALL, &tasks, &SvmParams::default(), seed).unwrap();
        for (r, (task, chance)) in results.iter().zip(expected) {
            ensure(r.classes.len() == (1.0 / chance).round() as usize, || {
                format!("{task} has {} classes", r.classes.len())
            })?;
            let gap = (r.evaluation.accuracy - chance).abs();
            worst = worst.max(gap);
            ensure(gap <= 0.05, || {
                format!("seed {seed}: {task} accuracy {:.3} vs chance {chance}", r.evaluation.accuracy)
            })?;
        }
    }
    Ok(format!("40/20/2 classes over 5 seeds, largest gap {:.1} points", worst * 100.0))
}

fn separability() -> Check {
    let start = Instant::now();
    let data = mock_profiles(11, 30, 3, true);
    let split = data.split(0.7, 11).unwrap();
    let report = feature_elimination(&data, &split, &FeatureGroup::ALL, &Task::ALL, &SvmParams::default(), 11)
        .map_err(|e| e.to_string())?;
    let chance = [0.025, 0.05, 0.5];
    for b in &report.baseline {
        ensure(b.evaluation.accuracy >= 0.95, || format!("{} baseline {:.3}", b.task, b.evaluation.accuracy))?;
    }
    let mut largest_other: f64 = 0.0;
    for row in &report.rows {
        if row.feature == FeatureGroup::Occupation {
            for (k, a) in row.accuracy.iter().enumerate() {
                ensure((a - chance[k]).abs() <= 0.05, || {
                    format!("without occupation {} is {a:.3}, chance {}", report.tasks[k], chance[k])
                })?;
            }
        } else {
            for d in &row.delta {
                largest_other = largest_other.max(d.abs());
            }
        }
    }
    ensure(largest_other < 0.02, || format!("a non-signal feature moved accuracy by {:.1} points", largest_other * 100.0))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(180))?;
    let base: Vec<String> = report.baseline.iter().map(|b| format!("{:.3}", b.evaluation.accuracy)).collect();
    Ok(format!(
        "baseline {}, occupation removal drops to chance, other deltas <= {:.1} points, {elapsed:.1?}",
        base.join("/"),
        largest_other * 100.0
    ))
}

fn random_dist(rng: &mut ChaCha8Rng, support: usize) -> Distribution {
    let raw: Vec<f64> = (0..support).map(|_| rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter()
        .enumerate()
        .filter(|_| rng.random_bool(0.8))
        .map(|(i, v)| (format!("w{i}"), v / total))
        .collect()
}

fn renorm(d: Distribution) -> Distribution {
    let total: f64 = d.values().sum();
    d.into_iter().map(|(k, v)| (k, v / total)).collect()
}

fn jsd_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let p = renorm(random_dist(&mut rng, 12));
        let q = renorm(random_dist(&mut rng, 12));
        if p.is_empty() || q.is_empty() {
            continue;
        }
        let (pq, qp) = (jsd(&p, &q), jsd(&q, &p));
        ensure((pq - qp).abs() <= 1e-12, || format!("case {case}: asymmetric {pq} vs {qp}"))?;
        ensure((-1e-12..=1.0 + 1e-12).contains(&pq), || format!("case {case}: out of bounds {pq}"))?;
        ensure(jsd(&p, &p).abs() <= 1e-12, || format!("case {case}: self-divergence"))?;
        if p != q {
            ensure(pq > 1e-12, || format!("case {case}: distinct distributions at zero"))?;
        }
    }
    let disjoint = jsd(
        &BTreeMap::from([("a".to_string(), 1.0)]),
        &BTreeMap::from([("b".to_string(), 1.0)]),
    );
    ensure((disjoint - 1.0).abs() <= 1e-12, || format!("disjoint supports give {disjoint}"))?;
    let hand = jsd(
        &BTreeMap::from([("a".to_string(), 1.0)]),
        &BTreeMap::from([("a".to_string(), 0.5), ("b".to_string(), 0.5)]),
    );
    let direct = 0.5 * (1.0f64 / 0.75).log2() + 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * 2.0f64.log2());
    ensure((hand - 0.3113).abs() <= 1e-4 && (hand - direct).abs() <= 1e-12, || format!("hand case {hand}"))?;
    Ok(format!("500 random pairs; hand case {hand:.4} bits"))
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn pipeline_config(out: &Path) -> String {
    let d = data_dir();
    format!(
        r#"out_dir = "{out}"
seed = 17

[inputs]
names = "{names}"
descriptors = "{descs}"
templates = "{templates}"
category_map = "{map}"

[scoring]
models = ["lm-a", "lm-b"]

[generation]
models = ["chat-a"]
repeats = 2

[analysis]
epochs = 5

[backends.lm-a]
kind = "mock"
model_id = "lm-a"
seed = 1

[[backends.lm-a.planted]]
ethnicity = "Arab"
gender = "F"
descriptor = "patient"
factor = 0.4

[backends.lm-b]
kind = "mock"
model_id = "lm-b"
seed = 2

[chat_backends.chat-a]
kind = "mock"
model_id = "chat-a"
seed = 9
signal_field = "religion"
"#,
        out = out.display(),
        names = d.join("demo/names.csv").display(),
        descs = d.join("demo/descriptors.csv").display(),
        templates = d.join("templates.txt").display(),
        map = d.join("category_map.example.csv").display(),
    )
}

const STAGES: [&str; 9] = ["expand", "score", "apx", "validate", "surface", "generate", "analyze", "jsd", "report"];

fn run_all(config: &Path) -> Result<(), String> {
    for stage in STAGES {
        let o = Command::new(env!("CARGO_BIN_EXE_stereoprobe"))
            .arg("--config")
            .arg(config)
            .arg(stage)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{stage}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().unwrap() != "cache" {
                    stack.push(p);
                }
            } else if p.file_name().unwrap() != "manifest.json" {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

struct Pipeline {
    _dir: tempfile::TempDir,
    out: PathBuf,
    first_error: Option<String>,
}

fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("run.toml");
    std::fs::write(&config, pipeline_config(&out)).unwrap();
    let first_error = run_all(&config).err();
    Pipeline {
        _dir: dir,
        out,
        first_error,
    }
}

fn determinism(p: &Pipeline) -> Check {
    if let Some(e) = &p.first_error {
        return Err(e.clone());
    }
    let first = snapshot(&p.out);
    let config = p.out.parent().unwrap().join("run.toml");
    run_all(&config)?;
    let second = snapshot(&p.out);
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    ensure(differing.is_empty(), || format!("artifacts differ: {}", differing.join(", ")))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.out.join("manifest.json")).unwrap()).unwrap();
    let mut calls = Vec::new();
    for (stage, key) in [("score", "lm-a"), ("score", "lm-b"), ("generate", "chat-a")] {
        let n = manifest["stages"][stage]["counts"][format!("{key}.backend_calls")].as_u64();
        ensure(n == Some(0), || format!("{stage} {key} made {n:?} backend calls on rerun"))?;
        calls.push(key);
    }
    Ok(format!("{} artifacts byte-identical; rerun made 0 backend calls ({})", first.len(), calls.join(", ")))
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    r.records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| e.to_string()))
        .collect()
}

fn is_pct(s: &str) -> bool {
    s.strip_suffix('%').is_some_and(|n| n.parse::<f64>().is_ok())
}

fn is_signed_delta(s: &str) -> bool {
    s == "0.0%" || ((s.starts_with('+') || s.starts_with('-')) && is_pct(&s[1..]))
}

fn table_shapes(p: &Pipeline) -> Check {
    if let Some(e) = &p.first_error {
        return Err(e.clone());
    }
    let report = p.out.join("report");

    let appendix = csv_rows(&report.join("surfaced_stereotypes_lm-a.csv"))?;
    ensure(appendix[0] == ["Group", "Associated Descriptors"], || format!("surfacing header {:?}", appendix[0]))?;
    ensure(appendix.len() > 1 && appendix[1..].iter().all(|r| r.len() == 2), || "surfacing rows".into())?;
    ensure(appendix.iter().any(|r| r[0] == "Arab Female" && r[1].contains("patient")), || {
        "planted pair missing from surfacing table".into()
    })?;

    let val = csv_rows(&report.join("validation_accuracy.csv"))?;
    ensure(val[0] == ["Model", "Acc. (PPL)", "Acc. (APX)"], || format!("validation header {:?}", val[0]))?;
    ensure(val.len() == 3 && val[1..].iter().all(|r| is_pct(&r[1]) && is_pct(&r[2])), || {
        format!("validation rows {:?}", &val[1..])
    })?;

    let acc = csv_rows(&report.join("classification_accuracy.csv"))?;
    ensure(acc[0] == ["Model", "Gender + Ethnicity", "Ethnicity", "Gender"], || format!("accuracy header {:?}", acc[0]))?;
    ensure(acc[1][0] == "Chance Level" && acc[1][3] == "50%", || format!("chance row {:?}", acc[1]))?;
    ensure(acc.len() == 3 && is_pct(&acc[2][1]), || format!("accuracy rows {:?}", &acc[1..]))?;

    let mut elim_tables = 0;
    for task in Task::ALL {
        let elim = csv_rows(&report.join(format!("feature_elimination_{task}.csv")))?;
        ensure(elim[0] == ["Feature Eliminated", "chat-a"], || format!("elimination header {:?}", elim[0]))?;
        ensure(elim[1][0] == "Overall Accuracy (%)" && is_pct(&elim[1][1]), || format!("overall row {:?}", elim[1]))?;
        ensure(elim.len() == 2 + FeatureGroup::ALL.len(), || format!("{} elimination rows", elim.len()))?;
        ensure(elim[2..].iter().all(|r| is_signed_delta(&r[1])), || "unsigned delta cell".into())?;
        elim_tables += 1;
    }
    Ok(format!(
        "surfacing {} rows, validation 2 models, accuracy with chance row, {elim_tables} signed-delta tables",
        appendix.len() - 1
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, result: Check| {
        match &result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    };
    // first, so the peak-memory reading reflects corpus expansion alone
    report("corpus counts", corpus_counts());
    report("oracle equivalence", oracle_equivalence());
    report("planted-bias recovery", planted_recovery());
    report("adjustment direction under group offsets", offset_direction());
    report("chance-level calibration", chance_levels());
    report("separability and feature elimination", separability());
    report("divergence properties", jsd_suite());
    let p = pipeline();
    report("determinism and cached reruns", determinism(&p));
    report("report table shapes", table_shapes(&p));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
