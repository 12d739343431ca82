//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use musc_cli::config::RunConfig;
use musc_cli::pipeline::{desk_experiment, head_tail_means, sweep_alpha, DeskOutcome};
use musc_core::confidence::{
    attach_weights_all, calibrate, entropy_of, score_profile, CalibrationConfig, Metric, Role, TokenWeights,
};
use musc_core::constraint_lang::{
    check, negate, sample_constraint_set, serialize_instruction, Instruction, Response, SamplerConfig, Vocab,
    EOS,
};
use musc_core::datagen::{build_dataset, DropoutConfig, PairSource};
use musc_core::lm::{ModelConfig, PolicyModel};
use musc_core::losses::{
    dpo_loss, tdpo_loss, token_bt_probability, total_loss, LossConfig, Method, PairLogps,
};
use musc_llm_client::stub::{serve, Stub};
use musc_llm_client::{
    build_nl_pairs, ChatClient, EndpointConfig, Message, NlPairOptions, PromptTemplateSet,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- helpers

fn random_pair(rng: &mut ChaCha8Rng) -> PairLogps {
    let nw = rng.gen_range(1..=16);
    let nl = rng.gen_range(1..=16);
    let lp =
        |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-6.0..-0.01)).collect::<Vec<f64>>();
    let policy_chosen = lp(rng, nw);
    let policy_rejected = lp(rng, nl);
    let ref_chosen = lp(rng, nw);
    let ref_rejected = lp(rng, nl);
    PairLogps { policy_chosen, policy_rejected, ref_chosen, ref_rejected, weights: None }
}

fn random_weights(rng: &mut ChaCha8Rng, p: &mut PairLogps) {
    let w = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
    p.weights = Some(TokenWeights {
        chosen: w(rng, p.policy_chosen.len()),
        rejected: w(rng, p.policy_rejected.len()),
    });
}

/// Sequence-level DPO written out directly: `ln(1 + e^{−z})`.
fn dpo_oracle(p: &PairLogps, beta: f64) -> f64 {
    let s = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>();
    let z = beta * (s(&p.policy_chosen, &p.ref_chosen) - s(&p.policy_rejected, &p.ref_rejected));
    (1.0 + (-z).exp()).ln()
}

fn tiny_model(seed: u64, vocab: &Vocab) -> PolicyModel {
    PolicyModel::new(ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 32,
        n_layers: 2,
        n_heads: 4,
        context_len: 96,
        seed,
    })
    .unwrap()
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_uniform, mut worst_const, mut worst_bt, mut worst_oracle) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let beta = rng.gen_range(0.05..2.0);
        let p = random_pair(&mut rng);
        let dpo = dpo_loss(&p, beta).unwrap().loss;
        worst_oracle = worst_oracle.max((dpo - dpo_oracle(&p, beta)).abs());
        let uniform = PairLogps {
            weights: Some(TokenWeights {
                chosen: vec![1.0; p.policy_chosen.len()],
                rejected: vec![1.0; p.policy_rejected.len()],
            }),
            ..p.clone()
        };
        worst_uniform = worst_uniform.max((tdpo_loss(&uniform, beta).unwrap().loss - dpo).abs());
        let c = rng.gen_range(0.1..2.0);
        let constant = PairLogps {
            weights: Some(TokenWeights {
                chosen: vec![c; p.policy_chosen.len()],
                rejected: vec![c; p.policy_rejected.len()],
            }),
            ..p.clone()
        };
        let scaled = dpo_loss(&p, c * beta).unwrap().loss;
        worst_const = worst_const.max((tdpo_loss(&constant, beta).unwrap().loss - scaled).abs());
        let bt = token_bt_probability(&uniform, beta).unwrap();
        worst_bt = worst_bt.max((-bt.ln() - tdpo_loss(&uniform, beta).unwrap().loss).abs());
    }
    let pass = worst_uniform <= 1e-9 && worst_const <= 1e-9 && worst_bt <= 1e-12 && worst_oracle <= 1e-9;
    verdict(
        pass,
        format!(
            "200 instances: uniform vs dpo {worst_uniform:.1e}, constant c vs dpo(c*beta) {worst_const:.1e}, \
             -ln BT vs tdpo {worst_bt:.1e}, dpo vs direct formula {worst_oracle:.1e}"
        ),
    )
}

fn criterion_2() -> Verdict {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = Vec::new();
    for method in [Method::Dpo, Method::Tdpo, Method::Simpo, Method::Ipo] {
        let cfg = LossConfig::for_method(method);
        let mut worst_m = 0.0f64;
        for _ in 0..50 {
            let mut p = random_pair(&mut rng);
            random_weights(&mut rng, &mut p);
            let t = total_loss(&p, &cfg).unwrap();
            let f = |q: &PairLogps| total_loss(q, &cfg).unwrap().loss;
            for side in 0..2 {
                let n = if side == 0 { p.policy_chosen.len() } else { p.policy_rejected.len() };
                for i in 0..n {
                    let bump = |d: f64| {
                        let mut q = p.clone();
                        let v = if side == 0 { &mut q.policy_chosen } else { &mut q.policy_rejected };
                        v[i] += d;
                        q
                    };
                    let fd = (f(&bump(h)) - f(&bump(-h))) / (2.0 * h);
                    let an = if side == 0 { t.grad_chosen[i] } else { t.grad_rejected[i] };
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    worst_m = worst_m.max(rel);
                }
            }
        }
        worst.push((method, worst_m));
    }
    let pass = worst.iter().all(|(_, w)| *w <= 1e-4);
    let detail = worst.iter().map(|(m, w)| format!("{m:?} {w:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(pass, format!("max relative error with sft mix 0.1, 50 instances each: {detail}"))
}

fn criterion_3() -> Verdict {
    let vocab = Vocab::default();
    let v = vocab.size();
    let ln_v = (v as f64).ln();
    let uniform = vec![-(v as f64).ln(); v];
    let h_uniform = entropy_of(&uniform);
    let mut one_hot = vec![f64::NEG_INFINITY; v];
    one_hot[3] = 0.0;
    let h_one_hot = entropy_of(&one_hot);
    let mut ok = (h_uniform - ln_v).abs() <= 1e-12 && h_one_hot == 0.0;

    let cfg = CalibrationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let model = tiny_model(7, &vocab);
    let sets: Vec<_> = (0..40)
        .map(|_| sample_constraint_set(&vocab, &mut rng, 3, 6, 12, &SamplerConfig::default()).unwrap())
        .collect();
    let (mut min_w, mut max_w, mut ent_ok, mut equal_ok, mut worst_recip) =
        (f64::MAX, 0.0f64, true, true, 0.0f64);
    for pair in sets.windows(2) {
        let xw = serialize_instruction(&Instruction::new(pair[0].clone()).unwrap(), &vocab).unwrap();
        let xl = serialize_instruction(&Instruction::new(pair[1].clone()).unwrap(), &vocab).unwrap();
        let len = rng.gen_range(1..=12);
        let mut resp: Vec<u32> = (0..len).map(|_| vocab.letter(rng.gen_range(0..vocab.n_letters))).collect();
        resp.push(EOS);
        let prof = score_profile(&model, Metric::Entropy, &xw, &xl, &resp).unwrap();
        ent_ok &= prof.values_own.iter().chain(&prof.values_cross).all(|&h| (0.0..=ln_v).contains(&h));
        let same = score_profile(&model, Metric::Entropy, &xw, &xw, &resp).unwrap();
        for role in [Role::Chosen, Role::Rejected] {
            let w = calibrate(&same.values_own, &same.values_cross, role, &cfg).unwrap();
            equal_ok &= w.iter().all(|&x| x == 1.0);
        }
        // without the cap, chosen and rejected ratios are reciprocal
        let uncapped = CalibrationConfig { gamma: f64::INFINITY, ..cfg };
        let a = calibrate(&prof.values_own, &prof.values_cross, Role::Chosen, &uncapped).unwrap();
        let b = calibrate(&prof.values_own, &prof.values_cross, Role::Rejected, &uncapped).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_recip = worst_recip.max((x * y - 1.0).abs());
        }
    }
    let pairs_src = PairSource::Sampled { n_pairs: 30, sampler: SamplerConfig::default() };
    let (pairs, _) =
        build_dataset(&model, &pairs_src, &DropoutConfig { seed: 3, ..DropoutConfig::default() }, &vocab)
            .unwrap();
    for metric in [Metric::Entropy, Metric::Perplexity, Metric::Pmi, Metric::Kldiv] {
        for calibrated in [true, false] {
            let c = CalibrationConfig { metric, calibrated, ..cfg };
            for p in attach_weights_all(&pairs, &model, &vocab, &c).unwrap() {
                let w = p.weights.unwrap();
                for &x in w.chosen.iter().chain(&w.rejected) {
                    min_w = min_w.min(x);
                    max_w = max_w.max(x);
                }
            }
        }
    }
    ok &= ent_ok && equal_ok && worst_recip <= 1e-12 && min_w > 0.0 && max_w <= 2.0;
    verdict(
        ok,
        format!(
            "H(uniform) - ln V = {:.1e}, H(one-hot) = {h_one_hot}, model entropies in [0, ln V]: {ent_ok}, \
             weights in [{min_w:.3e}, {max_w:.3}] over {} pairs x 8 settings, equal profiles give ones: {equal_ok}, \
             reciprocity {worst_recip:.1e}",
            h_uniform - ln_v,
            pairs.len()
        ),
    )
}

fn criterion_4() -> Verdict {
    let vocab = Vocab::default();
    let model = tiny_model(11, &vocab);
    let cfg = DropoutConfig { alpha: 0.3, seed: 404, ..DropoutConfig::default() };
    let src = PairSource::Sampled { n_pairs: 1000, sampler: SamplerConfig::default() };
    let (pairs, summary) = build_dataset(&model, &src, &cfg, &vocab).unwrap();
    let mut problems = Vec::new();
    if pairs.len() != 1000 {
        problems.push(format!("{} pairs", pairs.len()));
    }
    for (i, p) in pairs.iter().enumerate() {
        let n = p.chosen_instruction.len();
        // round half up of 0.3 n in integer arithmetic
        let expect = ((3 * n + 5) / 10).clamp(1, n - 1);
        let kept: Vec<_> = p
            .chosen_instruction
            .constraints()
            .iter()
            .enumerate()
            .filter(|(j, _)| !p.dropped_indices.contains(&(j + 1)))
            .map(|(_, c)| *c)
            .collect();
        let bad = p.dropped_indices.contains(&1)
            || p.dropped_indices.len() != expect
            || !(3..=10).contains(&n)
            || p.chosen_response == p.rejected_response
            || kept != p.rejected_instruction.constraints()
            || p.rejected_instruction.len() >= n;
        if bad {
            problems.push(format!("pair {i}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let mut flips = 0;
    let mut probes = 0;
    let probe_sampler = SamplerConfig { negative_rate: 0.5, ..SamplerConfig::default() };
    while probes < 10_000 {
        for c in sample_constraint_set(&vocab, &mut rng, 6, 6, 12, &probe_sampler).unwrap() {
            let len = rng.gen_range(0..=12);
            let content: Vec<u32> =
                (0..len).map(|_| vocab.letter(rng.gen_range(0..vocab.n_letters))).collect();
            let r = Response::from_content(&content);
            probes += 1;
            if check(&negate(&c), &r) == check(&c, &r) || negate(&negate(&c)) != c {
                problems.push(format!("negate of {c:?}"));
            } else {
                flips += 1;
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "{} pairs from {} candidates ({}), {flips}/{probes} negate probes complementary{}",
            pairs.len(),
            summary.attempted,
            summary.histogram(),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {:?}", &problems[..problems.len().min(5)])
            }
        ),
    )
}

fn criteria_5_and_6() -> (Verdict, Verdict) {
    let cfg = RunConfig::desk();
    let mut outcomes: Vec<DeskOutcome> = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let o = desk_experiment(&RunConfig { seed, ..cfg.clone() }).expect("desk experiment runs");
        lines.push(format!(
            "seed {seed}: ISR sft {:.3} uniform {:.3} weighted {:.3}, CSR sft {:.3} uniform {:.3} weighted {:.3}",
            o.sft.isr, o.uniform.isr, o.weighted.isr, o.sft.csr, o.uniform.csr, o.weighted.csr
        ));
        outcomes.push(o);
    }
    let wins = outcomes.iter().filter(|o| o.weighted_wins()).count();
    let v5 = verdict(wins >= 2, format!("weighted wins in {wins}/3 seeds; {}", lines.join("; ")));

    let mut ok6 = true;
    let mut notes = Vec::new();
    for o in &outcomes {
        for (arm, rows) in [("weighted", &o.weighted_metrics), ("uniform", &o.uniform_metrics)] {
            let (head, tail) = head_tail_means(rows, 0.1, |r| r.reward_margin);
            let step0 = &rows[0];
            let expect = std::f64::consts::LN_2 + 0.1 * step0.sft_component;
            let d0 = (step0.loss - expect).abs();
            ok6 &= tail > head && d0 <= 1e-6;
            notes.push(format!(
                "seed {} {arm}: margin {head:.3} -> {tail:.3}, step-0 |loss - (ln2 + 0.1 sft)| {d0:.1e}",
                o.seed
            ));
        }
    }
    (v5, verdict(ok6, notes.join("; ")))
}

fn criterion_7() -> Verdict {
    let alphas = [0.1, 0.2, 0.3, 0.4, 0.5];
    let rows = sweep_alpha(&RunConfig::desk(), &alphas, &[0]).expect("sweep runs");
    let mut table = String::from("alpha seed CSR ISR PSR");
    for r in &rows {
        table.push_str(&format!(
            " | {} {} {} {} {}",
            r.alpha,
            r.seed,
            r.csr.map_or("-".into(), |v| format!("{v:.3}")),
            r.isr.map_or("-".into(), |v| format!("{v:.3}")),
            r.psr.map_or("-".into(), |v| format!("{v:.3}")),
        ));
    }
    let complete = rows.len() == alphas.len() && rows.iter().all(|r| r.error.is_none() && r.csr.is_some());
    verdict(complete, table)
}

// llm client contract ---------------------------------------------------

const KEY: &str = "sk-acceptance-5d2b7e91";

struct Capture;
static LOGS: OnceLock<Mutex<Vec<String>>> = OnceLock::new();

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        LOGS.get_or_init(Default::default).lock().unwrap().push(record.args().to_string());
    }
    fn flush(&self) {}
}

fn endpoint(url: String, cache: &Path) -> EndpointConfig {
    EndpointConfig {
        base_url: url,
        backoff_base_secs: 0.01,
        cache_dir: cache.to_path_buf(),
        ..EndpointConfig::default()
    }
}

fn criterion_8() -> Verdict {
    log::set_logger(&Capture).unwrap();
    log::set_max_level(log::LevelFilter::Trace);
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    rt.block_on(async {
        let tmp = tempfile::tempdir().unwrap();
        let mut notes = Vec::new();
        let mut ok = true;

        // retry with backoff
        let stub = Stub::failing(2, 500);
        let url = serve(stub.clone()).await.unwrap();
        let client = ChatClient::with_key(endpoint(url, &tmp.path().join("c1")), KEY.into()).unwrap();
        let t = Instant::now();
        let reply = client.complete(&[Message::user("ping")]).await;
        let retried = reply.as_deref().ok() == Some("answer<ping>")
            && client.stats().retries() == 2
            && stub.requests() == 3
            && t.elapsed() >= Duration::from_millis(30);
        ok &= retried;
        notes.push(format!("retry/backoff {}", if retried { "ok" } else { "FAILED" }));

        // bounded parallelism, then cache idempotence on the same inputs
        let instructions = (0..8)
            .map(|i| format!("task {i}; constraint a{i}; constraint b{i}; constraint c{i}"))
            .collect::<Vec<_>>()
            .join("\n");
        let input = tmp.path().join("ins.txt");
        std::fs::write(&input, instructions).unwrap();
        let stub = Arc::new(Stub::default());
        stub.delay_ms.store(30, Ordering::SeqCst);
        let url = serve(stub.clone()).await.unwrap();
        let cache = tmp.path().join("cache");
        let cfg = EndpointConfig { max_parallel: 3, ..endpoint(url, &cache) };
        let templates = PromptTemplateSet::default();
        let opts = NlPairOptions::default();
        let first = ChatClient::with_key(cfg.clone(), KEY.into()).unwrap();
        let out_a = tmp.path().join("a.jsonl");
        let summary = build_nl_pairs(&first, &templates, &input, &out_a, &opts).await.unwrap();
        let bounded = stub.max_inflight() <= 3 && stub.max_inflight() >= 2 && summary.emitted == 8;
        ok &= bounded;
        notes.push(format!("max in flight {} with limit 3", stub.max_inflight()));
        let before = stub.requests();
        let second = ChatClient::with_key(cfg, KEY.into()).unwrap();
        let out_b = tmp.path().join("b.jsonl");
        build_nl_pairs(&second, &templates, &input, &out_b, &opts).await.unwrap();
        let idempotent = second.stats().attempts() == 0
            && stub.requests() == before
            && std::fs::read(&out_a).unwrap() == std::fs::read(&out_b).unwrap();
        ok &= idempotent;
        notes.push(format!("second run requests {}", stub.requests() - before));

        // key scan over every file written and every log record
        let mut leaked = Vec::new();
        let mut stack = vec![tmp.path().to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else if String::from_utf8_lossy(&std::fs::read(&p).unwrap()).contains("5d2b7e91") {
                    leaked.push(p.display().to_string());
                }
            }
        }
        let logs = LOGS.get_or_init(Default::default).lock().unwrap().clone();
        leaked.extend(logs.iter().filter(|l| l.contains("5d2b7e91")).cloned());
        if format!("{second:?}").contains("5d2b7e91") {
            leaked.push("client Debug".into());
        }
        let sent = stub.auth.lock().unwrap().iter().all(|a| a.ends_with(KEY));
        ok &= leaked.is_empty() && sent && !logs.is_empty();
        notes.push(format!(
            "key leaks {} across cache, outputs and {} log records",
            leaked.len(),
            logs.len()
        ));
        verdict(ok, notes.join(", "))
    })
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // target's name skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    // MUSC_ACCEPTANCE_ONLY=1,2,8 restricts the run to the listed criteria.
    let only: Option<Vec<u32>> = std::env::var("MUSC_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results = Vec::new();
    let mut timed = |n: u32, budget: f64, job: fn() -> Verdict| {
        if wanted(n) {
            let t = Instant::now();
            let v = job();
            results.push((n, budget, t.elapsed().as_secs_f64(), v));
        }
    };
    timed(1, 10.0, criterion_1);
    timed(2, 60.0, criterion_2);
    timed(3, 10.0, criterion_3);
    timed(4, 120.0, criterion_4);
    if wanted(5) || wanted(6) {
        let t = Instant::now();
        let (v5, v6) = criteria_5_and_6();
        let secs = t.elapsed().as_secs_f64();
        results.push((5, 2700.0, secs, v5));
        results.push((6, 2700.0, secs, v6));
    }
    let mut timed = |n: u32, budget: f64, job: fn() -> Verdict| {
        if wanted(n) {
            let t = Instant::now();
            let v = job();
            results.push((n, budget, t.elapsed().as_secs_f64(), v));
        }
    };
    timed(7, f64::INFINITY, criterion_7);
    timed(8, 30.0, criterion_8);

    let mut failed = 0;
    for (n, budget, secs, v) in &results {
        let in_time = secs < budget;
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        let timing =
            if in_time { format!("{secs:.1}s") } else { format!("{secs:.1}s, over the {budget}s budget") };
        println!("criterion {n}: {} ({timing}) {}", if pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
