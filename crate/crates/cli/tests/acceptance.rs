//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIP line per
//! criterion and exits nonzero if any criterion fails.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use negotiator::agents::toy::ToyModel;
use negotiator::agents::{AgentSession, Policy};
use negotiator::compute::{grad_check, ComputeError};
use negotiator::corpus::{
    build_vocab, examples_of, import_released_line, records_from_examples, synth_corpus, SynthStyle, TokenId,
};
use negotiator::env::{
    enumerate_allocations, is_pareto_optimal, resolve, sample_scenario, score, Allocation, GeneratorConfig,
    ItemPool, Scenario, Selection, Valuation,
};
use negotiator::eval::{corpus_stats, evaluate_pairing, EvalConfig, MetricsReport};
use negotiator::model::{EncodedExample, ModelConfig, NegotiationModel};
use negotiator::train::{train_rl, train_supervised, RlConfig, SupervisedConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, name: &str, v: Verdict) {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name}: {detail}");
        std::io::stdout().flush().ok();
    }
}

fn gradient_check() -> Verdict {
    let t = Instant::now();
    let mut cfg = ModelConfig::tiny(12);
    cfg.init_range = 0.5;
    let m = NegotiationModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(11));
    let ex = EncodedExample {
        goal: [1, 4, 4, 1, 1, 2],
        tokens: [0, 7, 2].map(TokenId).to_vec(),
        output: Some([1, 0, 1, 0, 4, 0]),
    };
    let mut store = m.store().clone();
    let err = grad_check(&mut store, 1e-5, |g| {
        m.total_loss_node(g, &ex, 0.5)
            .map_err(|e| ComputeError::Shape(e.to_string()))
    });
    let secs = t.elapsed().as_secs_f64();
    match err {
        Ok(e) => verdict(
            e < 1e-4 && secs < 120.0,
            format!("max relative error {e:.2e} (< 1e-4), {secs:.1}s (< 120s)"),
        ),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn overfit() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records = synth_corpus(&mut rng, 20, &SynthStyle::default());
    let examples = examples_of(&records).expect("synthetic records are well formed");
    let vocab = build_vocab(&examples, 1);
    let data = EncodedExample::encode_all(&examples, &vocab);
    let mut mc = ModelConfig::small(vocab.len());
    mc.init_range = 0.5;
    let mut model = NegotiationModel::new(mc, &mut rng);
    let cfg = SupervisedConfig {
        epochs: 200,
        anneal: 1.0,
        ..SupervisedConfig::default()
    };
    let report = match train_supervised(&mut model, &data, &data, &cfg, &mut rng) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let secs = t.elapsed().as_secs_f64();
    let first = report.epochs.iter().find(|e| e.valid_ppl < 1.2).map(|e| e.epoch);
    verdict(
        first.is_some() && secs < 300.0,
        format!(
            "training perplexity {:.3} (best, epoch {}), first below 1.2 at epoch {}, {secs:.0}s (< 300s)",
            report.best_valid_ppl,
            report.best_epoch,
            first.map_or("-".to_string(), |e| e.to_string())
        ),
    )
}

/// Pareto optimality by direct comparison of every pair of splits.
fn pareto_oracle(s: &Scenario, a: [u32; 3]) -> bool {
    let c = s.pool.counts;
    let pts = |x: [u32; 3]| {
        let ra: u32 = (0..3).map(|i| x[i] * s.valuation_a.values[i]).sum();
        let rb: u32 = (0..3).map(|i| (c[i] - x[i]) * s.valuation_b.values[i]).sum();
        (ra, rb)
    };
    let (ra, rb) = pts(a);
    for x in 0..=c[0] {
        for y in 0..=c[1] {
            for z in 0..=c[2] {
                let (oa, ob) = pts([x, y, z]);
                if oa >= ra && ob >= rb && (oa, ob) != (ra, rb) {
                    return false;
                }
            }
        }
    }
    true
}

fn figure2() -> Scenario {
    Scenario::new(
        ItemPool::new([3, 2, 1]),
        Valuation::new([1, 3, 1]),
        Valuation::new([2, 1, 2]),
    )
}

fn oracles() -> Verdict {
    let mut size_errors = 0;
    let mut pools = 0;
    for a in 0..=7u32 {
        for b in 0..=7 - a {
            for c in 0..=7 - a - b {
                pools += 1;
                let all = enumerate_allocations(&ItemPool::new([a, b, c]));
                let distinct: std::collections::HashSet<_> = all.iter().collect();
                if all.len() as u32 != (a + 1) * (b + 1) * (c + 1) || distinct.len() != all.len() {
                    size_errors += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..1000 {
        let s = sample_scenario(&mut rng, &GeneratorConfig::default()).expect("default generator");
        for alloc in enumerate_allocations(&s.pool) {
            checked += 1;
            if is_pareto_optimal(&s, &alloc) != pareto_oracle(&s, alloc.take) {
                mismatches += 1;
            }
        }
    }
    let s = figure2();
    let fig2 = is_pareto_optimal(&s, &Allocation::new([2, 2, 0])) && pareto_oracle(&s, [2, 2, 0]);
    verdict(
        size_errors == 0 && mismatches == 0 && fig2,
        format!(
            "{pools} pools with size errors {size_errors}; {mismatches} mismatches over {checked} splits of 1000 scenarios; (8,4) split Pareto optimal: {fig2}"
        ),
    )
}

fn fixtures() -> Verdict {
    let s = figure2();
    let f2 = resolve(&s.pool, &Selection::claim([2, 2, 0]), &Selection::claim([1, 0, 1]), &s.valuation_a, &s.valuation_b);
    // Agent: book 6, hat 4, ball 0; human: book 3, hat 1, ball 2; pool 1/1/3.
    let s4 = Scenario::new(
        ItemPool::new([1, 1, 3]),
        Valuation::new([6, 4, 0]),
        Valuation::new([3, 1, 2]),
    );
    let f4 = resolve(&s4.pool, &Selection::claim([1, 1, 0]), &Selection::claim([0, 0, 3]), &s4.valuation_a, &s4.valuation_b);
    verdict(
        f2.agreed && (f2.reward_a, f2.reward_b) == (8, 4) && f4.agreed && (f4.reward_a, f4.reward_b) == (10, 6),
        format!(
            "first fixture ({}, {}), expected (8, 4); second fixture ({}, {}), expected (10, 6)",
            f2.reward_a, f2.reward_b, f4.reward_a, f4.reward_b
        ),
    )
}

/// Exact expected `r(o) p(o)` over every continuation of the toy model.
fn exact_value(m: &ToyModel, history: &mut Vec<TokenId>, valuation: &Valuation, pool: &ItemPool) -> f64 {
    if history.last() == Some(&TokenId::CHOOSE) {
        let probs = m.output_probs(history);
        // Independent argmax over feasible splits and no-agreement.
        let mut best = (None, -1.0);
        for x in 0..=pool.counts[0] {
            for y in 0..=pool.counts[1] {
                for z in 0..=pool.counts[2] {
                    let own = [x, y, z];
                    let other = [pool.counts[0] - x, pool.counts[1] - y, pool.counts[2] - z];
                    let p: f64 = (0..3).map(|i| probs[i][own[i] as usize] * probs[3 + i][other[i] as usize]).product();
                    if p > best.1 {
                        best = (Some(own), p);
                    }
                }
            }
        }
        let na: f64 = probs.iter().map(|p| p[p.len() - 1]).product();
        return match best {
            (Some(own), p) if p >= na => score(valuation, &Allocation::new(own)) as f64 * p,
            _ => 0.0,
        };
    }
    let probs = m.next_probs(history);
    let mut total = 0.0;
    for (t, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            history.push(TokenId(t as u32));
            total += p * exact_value(m, history, valuation, pool);
            history.pop();
        }
    }
    total
}

fn rollout_estimator() -> Verdict {
    let m = ToyModel::default();
    let pool = ItemPool::new([2, 1, 1]);
    let valuation = Valuation::new([2, 3, 3]);
    let goal = [2, 2, 1, 3, 1, 3];
    let session = AgentSession::new(&m, goal, Policy::Likelihood, 1.0, 10).expect("toy session");
    let candidates = [
        vec![TokenId::WRITE],
        vec![TokenId::WRITE, TokenId(3), TokenId::READ],
        vec![TokenId::WRITE, TokenId(4)],
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (k, prefix) in candidates.iter().enumerate() {
        let exact = exact_value(&m, &mut prefix.clone(), &valuation, &pool);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let est = session.estimate_value(prefix, 10_000, 50, &mut rng).expect("toy rollout");
        let rel = ((est - exact) / exact).abs();
        let runs: Vec<f64> = (0..1000)
            .map(|_| session.estimate_value(prefix, 5, 50, &mut rng).expect("toy rollout"))
            .collect();
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64;
        let se = (var / runs.len() as f64).sqrt();
        let z = if se > 1e-12 { (mean - exact).abs() / se } else { 0.0 };
        ok &= se > 1e-12 && rel < 0.02 && z < 3.0;
        lines.push(format!("exact {exact:.4e} S=10000 {est:.4e} (rel {rel:.4}), 1000x S=5 mean {mean:.4e} ({z:.2} SE)"));
    }
    verdict(ok, lines.join("; "))
}

struct Trained {
    sv: NegotiationModel,
    sup: Vec<EncodedExample>,
    scenarios: Vec<Scenario>,
    baseline: MetricsReport,
    sv_secs: f64,
}

fn train_baseline() -> Result<Trained, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let style = SynthStyle::default();
    let train = synth_corpus(&mut rng, 1000, &style);
    let valid = synth_corpus(&mut rng, 100, &style);
    let ex = examples_of(&train).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&ex, 1);
    let sup = EncodedExample::encode_all(&ex, &vocab);
    let venc = EncodedExample::encode_all(&examples_of(&valid).map_err(|e| e.to_string())?, &vocab);
    let mut sv = NegotiationModel::new(ModelConfig::small(vocab.len()), &mut rng);
    let cfg = SupervisedConfig {
        epochs: 12,
        ..SupervisedConfig::default()
    };
    train_supervised(&mut sv, &sup, &venc, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let sv_secs = t.elapsed().as_secs_f64();
    let mut srng = ChaCha8Rng::seed_from_u64(77);
    let scenarios: Vec<Scenario> = (0..200)
        .map(|_| sample_scenario(&mut srng, &GeneratorConfig::default()).expect("default generator"))
        .collect();
    let eval = EvalConfig { seed: 5, ..EvalConfig::default() };
    let (baseline, _) = evaluate_pairing((&sv, Policy::Likelihood), (&sv, Policy::Likelihood), &scenarios, &eval)
        .map_err(|e| e.to_string())?;
    Ok(Trained { sv, sup, scenarios, baseline, sv_secs })
}

fn self_play_mean(r: &MetricsReport) -> f64 {
    (r.score_all_a + r.score_all_b) / 2.0
}

fn rl_criteria(t: &Trained, suite: &mut Suite) {
    let start = Instant::now();
    let mut model = t.sv.clone();
    let partner = t.sv.clone();
    let partner_text = partner.save();
    let cfg = RlConfig {
        episodes: 2000,
        ..RlConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let report = match train_rl(&mut model, &partner, &GeneratorConfig::default(), &t.sup, &cfg, &mut rng) {
        Ok(r) => r,
        Err(e) => {
            suite.report("rl-gain", Verdict::Fail(e.to_string()));
            suite.report("frozen-partner", Verdict::Fail(e.to_string()));
            return;
        }
    };
    let eval = EvalConfig { seed: 5, ..EvalConfig::default() };
    let rl = evaluate_pairing((&model, Policy::Likelihood), (&partner, Policy::Likelihood), &t.scenarios, &eval);
    let secs = start.elapsed().as_secs_f64();
    match rl {
        Ok((r, _)) => {
            let base = self_play_mean(&t.baseline);
            let gain = r.score_all_a - base;
            suite.report(
                "rl-gain",
                verdict(
                    gain >= 0.5 && r.n_dialogues >= 400 && secs < 1800.0,
                    format!(
                        "RL vs LIKELIHOOD {:.2} vs {:.2} over {} dialogues, LIKELIHOOD self-play {base:.2}, gain {gain:+.2} (>= 0.5); {} episodes in {secs:.0}s plus {:.0}s supervised pretraining (< 1800s)",
                        r.score_all_a, r.score_all_b, r.n_dialogues, report.episodes.len(), t.sv_secs
                    ),
                ),
            );
        }
        Err(e) => suite.report("rl-gain", Verdict::Fail(e.to_string())),
    }
    let same = report.partner_checksum_before == report.partner_checksum_after && partner.save() == partner_text;
    suite.report(
        "frozen-partner",
        verdict(
            same,
            format!(
                "partner checksum {:016x} before, {:016x} after",
                report.partner_checksum_before, report.partner_checksum_after
            ),
        ),
    );
}

fn rollout_gain(t: &Trained) -> Verdict {
    let start = Instant::now();
    let scenarios = &t.scenarios[..100];
    let eval = EvalConfig { seed: 9, ..EvalConfig::default() };
    let base = evaluate_pairing((&t.sv, Policy::Likelihood), (&t.sv, Policy::Likelihood), scenarios, &eval);
    let roll = evaluate_pairing((&t.sv, "rollout:10,5".parse().expect("policy")), (&t.sv, Policy::Likelihood), scenarios, &eval);
    let (base, roll) = match (base, roll) {
        (Ok((b, _)), Ok((r, _))) => (b, r),
        (Err(e), _) | (_, Err(e)) => return Verdict::Fail(e.to_string()),
    };
    let b = self_play_mean(&base);
    let gain = roll.score_all_a - b;
    let pareto = |r: &MetricsReport| r.pct_pareto.unwrap_or(0.0);
    verdict(
        gain >= 0.5 && roll.n_dialogues >= 200 && pareto(&roll) >= pareto(&base),
        format!(
            "ROLLOUTS vs LIKELIHOOD {:.2} vs {:.2} over {} dialogues, LIKELIHOOD self-play {b:.2}, gain {gain:+.2} (>= 0.5); Pareto {:.1}% vs {:.1}% (must not decrease); {:.0}s",
            roll.score_all_a,
            roll.score_all_b,
            roll.n_dialogues,
            pareto(&roll),
            pareto(&base),
            start.elapsed().as_secs_f64()
        ),
    )
}

const TINY_CONFIG: &str = "[model]\nsize = \"tiny\"\n\n[supervised]\nepochs = 2\n\n[rl]\nepisodes = 8\n\n[engine]\nmax_turns = 6\nmax_turn_tokens = 15\n";

fn cli(dir: &Path, args: &[&str], stdin: Option<&str>) -> Result<Vec<u8>, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_negotiator"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "cfg.toml", "--seed", "3"])
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let input = child.stdin.take();
    if let (Some(mut pipe), Some(text)) = (input, stdin) {
        pipe.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    }
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn cli_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    fs::write(dir.join("cfg.toml"), TINY_CONFIG).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    cli(dir, &["gen-data", "--n", "12", "--out", "train.txt"], None)?;
    cli(dir, &["gen-data", "--n", "4", "--out", "valid.txt"], None)?;
    cli(dir, &["build-vocab", "--train", "train.txt", "--out", "vocab-built.txt"], None)?;
    cli(dir, &["train-sv", "--train", "train.txt", "--valid", "valid.txt", "--out-dir", "out"], None)?;
    cli(dir, &["train-rl", "--model", "out/sv-best.ckpt", "--vocab", "out/vocab.txt", "--train", "train.txt", "--out-dir", "out"], None)?;
    outputs.push(("eval".to_string(), cli(dir, &["eval", "--model-a", "out/rl-final.ckpt", "--model-b", "out/sv-best.ckpt", "--policy-a", "rollout:3,2", "--dialogues", "6"], None)?));
    cli(dir, &["selfplay", "--model-a", "out/rl-final.ckpt", "--model-b", "out/sv-best.ckpt", "--vocab", "out/vocab.txt", "--n", "4", "--out", "selfplay.txt"], None)?;
    outputs.push(("stats".to_string(), cli(dir, &["stats", "--data", "train.txt"], None)?));
    outputs.push((
        "chat".to_string(),
        cli(dir, &["chat", "--model", "out/sv-best.ckpt", "--vocab", "out/vocab.txt"], Some("i want the balls\nok deal <choose>\n1 1 1\n"))?,
    ));
    for f in [
        "train.txt", "valid.txt", "vocab-built.txt", "out/sv-best.ckpt", "out/vocab.txt", "out/sv-report.txt",
        "out/rl-final.ckpt", "out/rl-report.txt", "selfplay.txt",
    ] {
        outputs.push((f.to_string(), fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?));
    }
    Ok(outputs)
}

fn determinism() -> Verdict {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().expect("temp dir")).collect();
    let runs: Result<Vec<_>, String> = dirs.iter().map(|d| cli_run(d.path())).collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e),
    };
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|((_, a), (_, b))| a != b || a.is_empty())
        .map(|((n, _), _)| n.as_str())
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "{} outputs of gen-data, build-vocab, train-sv, train-rl, eval, selfplay, stats and chat compared across two runs; differing or empty: {differing:?}",
            runs[0].len()
        ),
    )
}

/// Reads the released human corpus from a file or a directory of files.
fn human_corpus() -> Verdict {
    let Some(path) = std::env::var_os("NEGOTIATION_HUMAN_DATA") else {
        return Verdict::Skip("set NEGOTIATION_HUMAN_DATA to the released dataset to run".into());
    };
    let path = Path::new(&path);
    let files = if path.is_dir() {
        let mut v: Vec<_> = match fs::read_dir(path) {
            Ok(d) => d.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect(),
            Err(e) => return Verdict::Fail(format!("{}: {e}", path.display())),
        };
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut examples = Vec::new();
    for f in &files {
        let text = match fs::read_to_string(f) {
            Ok(t) => t,
            Err(e) => return Verdict::Fail(format!("{}: {e}", f.display())),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match import_released_line(line) {
                Ok(ex) => examples.push(ex),
                Err(e) => return Verdict::Fail(format!("{}: {e}", f.display())),
            }
        }
    }
    let stats = match records_from_examples(&examples).map_err(|e| e.to_string()).and_then(|r| corpus_stats(&r).map_err(|e| e.to_string())) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e),
    };
    let close = |x: f64, v: f64| (x - v).abs() <= 0.05 + 1e-9;
    let ok = stats.dialogues == 5808
        && close(stats.avg_turns, 6.6)
        && close(stats.avg_words_per_turn, 7.6)
        && close(stats.pct_agreed, 80.1)
        && stats.avg_score.is_some_and(|s| close(s, 6.0))
        && stats.pct_pareto.is_some_and(|p| close(p, 76.9));
    verdict(ok, format!("{}", stats).replace('\n', " "))
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let start = Instant::now();
    suite.report("gradient-check", gradient_check());
    suite.report("overfit", overfit());
    suite.report("feasibility-pareto-oracles", oracles());
    suite.report("fixtures", fixtures());
    suite.report("rollout-estimator", rollout_estimator());
    match train_baseline() {
        Ok(t) => {
            rl_criteria(&t, &mut suite);
            suite.report("rollout-gain", rollout_gain(&t));
        }
        Err(e) => {
            for name in ["rl-gain", "frozen-partner", "rollout-gain"] {
                suite.report(name, Verdict::Fail(format!("supervised baseline: {e}")));
            }
        }
    }
    suite.report("determinism", determinism());
    suite.report("human-corpus", human_corpus());
    println!(
        "acceptance: {} failing, {:.0}s",
        suite.failures,
        start.elapsed().as_secs_f64()
    );
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
