//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llmperf::arch::{NetworkLink, TechNode, Topology};
use llmperf::comm::{ring_allreduce, tree_allreduce, CollectiveRequest};
use llmperf::config::PresetLibrary;
use llmperf::dse::{
    minimize_on_simplices, random_search, search, sweep, HardwareContext, SearchConfig, SweepAxes, Workload,
};
use llmperf::engine::{bound_breakdown, predict_inference, BreakdownScope, Category, PredictionReport};
use llmperf::kernelperf::{Bound, UtilizationPolicy};
use llmperf::memory::{activation_memory, kv_cache_size, training_footprint, RecomputePlan};
use llmperf::parallelism::{ParallelismConfig, RecomputeMode};
use llmperf::validate::{run_fixtures, FixtureFile, FixtureOutcome, FixtureSet};
use llmperf::workload::{ActivationProfile, InferenceConfig};

type Check = Result<String, String>;

fn lib() -> PresetLibrary {
    PresetLibrary::builtin().expect("bundled presets")
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

fn formula_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 32;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    let model = lib().model("llama2_13b").unwrap();
    for _ in 0..cases {
        let layers = rng.gen_range(1..=96u64);
        let a_inp = rng.gen_range(1.0..1e9);
        let (sm, mask, out) = (rng.gen_range(0.0..1e9), rng.gen_range(0.0..1e9), rng.gen_range(0.0..1e9));
        let a_tot = a_inp + rng.gen_range(0.0..1e10) + sm + mask + out;
        let p = ActivationProfile { a_tot, a_inp, a_sm: sm, a_do_mask: mask, a_do_out: out };
        let n = rng.gen_range(1..=layers);
        let full = activation_memory(&p, layers, &RecomputePlan { mode: RecomputeMode::Full, checkpoints: Some(n) }, 1)
            .unwrap();
        note("full", rel(full, n as f64 * a_inp + layers as f64 / n as f64 * (a_tot - a_inp)));
        let sel = activation_memory(&p, layers, &RecomputePlan { mode: RecomputeMode::Selective, checkpoints: None }, 1)
            .unwrap();
        note("selective", rel(sel, layers as f64 * (a_tot - (sm + mask + out))));

        let k = rng.gen_range(0.0..1e11);
        let nodes = rng.gen_range(2..=2048u32);
        let (bw, lat, util) = (rng.gen_range(1e8..1e12), rng.gen_range(0.0..1e-4), rng.gen_range(0.05..=1.0));
        let link = NetworkLink { name: "x".into(), bandwidth: bw, latency: lat, utilization: util, topology: Topology::Ring };
        let req = CollectiveRequest { volume: k, participants: nodes, link };
        let nf = nodes as f64;
        let bw_term = 2.0 * k * (nf - 1.0) / (nf * bw * util);
        note("ring", rel(ring_allreduce(&req), bw_term + 2.0 * lat * (nf - 1.0)));
        note("tree", rel(tree_allreduce(&req), bw_term + 2.0 * lat * nf.log2()));

        let mut m = model.clone();
        m.layers = rng.gen_range(1..=96);
        m.hidden = 128 * rng.gen_range(1..=64);
        let batch = rng.gen_range(1..=32);
        let ctx = rng.gen_range(0..=8192);
        let inf = InferenceConfig { batch, prompt_len: ctx.max(1), gen_len: 0, kv_cache: true };
        let want = 2 * batch * ctx * m.precision_bytes as u64 * m.layers * m.hidden;
        note("kv_cache", rel(kv_cache_size(&m, &inf, ctx, 1) as f64, want as f64));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    verdict(
        max <= 1e-12 && elapsed < 1.0 && worst.len() == 5,
        format!("{cases} cases x {} formulas, max rel err {max:.1e}, {elapsed:.3} s", worst.len()),
    )
}

fn fixtures(set: FixtureSet) -> Vec<FixtureOutcome> {
    run_fixtures(&lib(), &FixtureFile::bundled().unwrap(), set, &UtilizationPolicy::default()).unwrap()
}

fn worst_error(outcomes: &[FixtureOutcome]) -> String {
    let w = outcomes
        .iter()
        .max_by(|a, b| {
            let e = |o: &FixtureOutcome| o.relative_error.map_or(f64::INFINITY, f64::abs);
            e(a).total_cmp(&e(b))
        })
        .unwrap();
    format!("worst {} {:+.1}%", w.id, w.relative_error.unwrap_or(f64::NAN) * 100.0)
}

fn training_validation() -> Check {
    let start = Instant::now();
    let out = fixtures(FixtureSet::Training);
    let within = out.iter().filter(|o| o.pass).count();
    let mut by_expected: Vec<&FixtureOutcome> = out.iter().collect();
    by_expected.sort_by(|a, b| a.expected_time.total_cmp(&b.expected_time));
    let ordered = by_expected
        .windows(2)
        .all(|w| matches!((w[0].predicted_time, w[1].predicted_time), (Some(a), Some(b)) if a < b));
    verdict(
        within == 11 && out.len() == 11 && ordered,
        format!(
            "{within}/11 within 25%, ordering {}, {}, {:.2} s",
            if ordered { "preserved" } else { "broken" },
            worst_error(&out),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn inference_validation() -> Check {
    let out = fixtures(FixtureSet::Inference);
    let within = out.iter().filter(|o| o.pass).count();
    // ids look like `llama213b-tp4-a100`.
    let mut series: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for o in &out {
        let parts: Vec<&str> = o.id.split('-').collect();
        let tp: u64 = parts[1].trim_start_matches("tp").parse().unwrap();
        series
            .entry((parts[0].to_string(), parts[2].to_string()))
            .or_default()
            .insert(tp, o.predicted_time.unwrap_or(f64::NAN));
    }
    let mut broken = Vec::new();
    for ((model, gpu), t) in &series {
        let chain: Vec<f64> = [1, 2, 4].iter().filter_map(|tp| t.get(tp).copied()).collect();
        if !chain.windows(2).all(|w| w[1] < w[0]) {
            broken.push(format!("{model}/{gpu}"));
        }
    }
    verdict(
        within == 22 && out.len() == 22 && broken.is_empty(),
        format!(
            "{within}/22 within 25%, {}, tp1>tp2>tp4 holds for {}/{} series",
            worst_error(&out),
            series.len() - broken.len(),
            series.len()
        ),
    )
}

fn llama13b_prefill(cluster: &str, batch: u64) -> PredictionReport {
    let l = lib();
    let inf = InferenceConfig { batch, prompt_len: 200, gen_len: 200, kv_cache: true };
    predict_inference(
        &l.model("llama2_13b").unwrap(),
        &inf,
        &ParallelismConfig::default(),
        &l.cluster(cluster).unwrap(),
        &UtilizationPolicy::default(),
    )
    .unwrap()
}

fn bound_classification() -> Check {
    let gemms = ["qkv_proj", "attn_scores", "attn_context", "out_proj", "mlp1", "mlp2"];
    let expected = [
        ("a100_hdr", [false, true, true, false, false, false]),
        ("h100_ndr", [true; 6]),
    ];
    let mut hits = 0;
    let mut labels = Vec::new();
    for (cluster, memory_bound) in expected {
        let r = llama13b_prefill(cluster, 1);
        let mut row = Vec::new();
        for (name, want) in gemms.iter().zip(memory_bound) {
            let rec = r
                .per_kernel
                .iter()
                .find(|k| k.category == Category::Prefill && k.name == *name)
                .expect("prefill GEMM present");
            let got = rec.estimate.bound.is_memory();
            hits += (got == want) as usize;
            row.push(if got { "mem" } else { "cmp" });
        }
        labels.push(format!("{}: {}", &cluster[..4], row.join("/")));
    }
    verdict(hits == 12, format!("{hits}/12 match ({})", labels.join("; ")))
}

fn compute_fraction() -> Check {
    let frac = |cluster, batch| {
        bound_breakdown(&llama13b_prefill(cluster, batch), BreakdownScope::PerPhase)
            .into_iter()
            .find(|r| r.label == "prefill")
            .map_or(f64::NAN, |r| r.fraction(Bound::Compute))
    };
    let (a1, a16, h1) = (frac("a100_hdr", 1), frac("a100_hdr", 16), frac("h100_ndr", 1));
    verdict(
        (0.57..=0.77).contains(&a1) && a16 >= 0.90 && h1 == 0.0,
        format!("A100 B=1 {a1:.3}, A100 B=16 {a16:.3}, H100 B=1 {h1:.3}"),
    )
}

fn memory_ordering() -> Check {
    let l = lib();
    let file = FixtureFile::bundled().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for f in file.training.iter().filter(|f| f.id.ends_with("sp-selective")) {
        let model = l.resolve_model(&f.model).unwrap();
        let at = |mode| {
            let par = ParallelismConfig { recompute: mode, checkpoints: None, ..f.parallelism.clone() };
            training_footprint(&model, &par, llmperf::memory::DEFAULT_OPTIMIZER_BYTES_PER_PARAM).unwrap()
        };
        let (none, sel, full) = (at(RecomputeMode::None), at(RecomputeMode::Selective), at(RecomputeMode::Full));
        let gap = (sel.total - full.total) as f64 / full.total as f64;
        let this = none.activations > sel.activations && sel.activations >= full.activations && gap < 0.2;
        ok &= this;
        details.push(format!("{} gap {:.1}%", model.name, gap * 100.0));
    }
    verdict(ok && details.len() == 4, details.join(", "))
}

fn gpt7b_context() -> (Workload, HardwareContext) {
    let l = lib();
    let par = ParallelismConfig {
        dp: 64,
        tp: 4,
        sp: 4,
        pp: 4,
        microbatches: 8,
        recompute: RecomputeMode::Selective,
        ..Default::default()
    };
    let mut cluster = l.cluster("a100_hdr").unwrap().with_total_devices(1024);
    cluster.inter_link = l.link("ndr_x8").unwrap();
    let ctx = HardwareContext::anchored(cluster, UtilizationPolicy::default());
    (Workload::Training { model: l.model("gpt_7b").unwrap(), parallelism: par }, ctx)
}

fn grid(nodes: &[TechNode], drams: &[&str], net: &str) -> Vec<f64> {
    let l = lib();
    let (wl, ctx) = gpt7b_context();
    let axes = SweepAxes {
        nodes: nodes.to_vec(),
        dram: drams.iter().map(|d| l.dram(d).unwrap()).collect(),
        network: vec![l.link(net).unwrap()],
    };
    sweep(&wl, &ctx, &axes, None).iter().map(|c| c.time().unwrap_or(f64::NAN)).collect()
}

fn node_saturation() -> Check {
    let times = grid(&TechNode::ALL, &["hbm2e"], "ndr_x8");
    let monotone = times.windows(2).all(|w| w[1] <= w[0]);
    let n5 = TechNode::ALL.iter().position(|n| *n == TechNode::N5).unwrap();
    let gains: Vec<f64> = times[n5..].windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
    let steps: Vec<String> = TechNode::ALL[n5..]
        .windows(2)
        .zip(&gains)
        .map(|(n, g)| format!("{}->{} {:.1}%", n[0], n[1], g * 100.0))
        .collect();
    verdict(
        monotone && gains.iter().all(|g| *g < 0.05),
        format!("monotone {monotone}; gains beyond N5: {}", steps.join(", ")),
    )
}

fn dram_generations() -> Check {
    let t = grid(&[TechNode::N7], &["hbm2", "hbm2e", "hbm3_train", "hbm4"], "ndr_x8");
    let early = 1.0 - t[1] / t[0];
    let late = (1.0 - t[3] / t[2]).abs();
    verdict(
        early > 0.10 && late < 0.02,
        format!("at N7: HBM2->HBM2E -{:.1}%, HBM3->HBM4 {:.1}%", early * 100.0, late * 100.0),
    )
}

fn inference_dram_sweep() -> Check {
    let l = lib();
    let drams = ["gdr6", "hbm2", "hbm2e", "hbm3_train", "hbm3_h100", "hbm3e", "hbmx"];
    let inf = InferenceConfig { batch: 1, prompt_len: 200, gen_len: 200, kv_cache: true };
    let model = l.model("llama2_13b").unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    for tp in [2u64, 8] {
        let runs: Vec<PredictionReport> = drams
            .iter()
            .map(|d| {
                let mut c = l.cluster("a100_hdr").unwrap();
                c.device = c.device.with_dram(&l.dram(d).unwrap());
                let par = ParallelismConfig { tp, ..Default::default() };
                predict_inference(&model, &inf, &par, &c, &UtilizationPolicy::default()).unwrap()
            })
            .collect();
        let monotone = runs.windows(2).all(|w| w[1].total_time <= w[0].total_time);
        let (a, b) = (runs[5].kernel_time(), runs[6].kernel_time());
        let gain = 1.0 - b / a;
        ok &= monotone && gain < 0.05;
        details.push(format!("tp{tp}: monotone {monotone}, HBM3e->HBMX memory time -{:.1}%", gain * 100.0));
    }
    verdict(ok, details.join("; "))
}

fn network_speedup() -> Check {
    let slow = grid(&[TechNode::N7], &["hbm2e"], "net_100")[0];
    let fast = grid(&[TechNode::N7], &["hbm2e"], "net_400")[0];
    verdict(fast < slow, format!("100 GB/s {slow:.4} s -> 400 GB/s {fast:.4} s"))
}

fn dse_correctness() -> Check {
    let (a, b) = (1.0f64, 4.0f64);
    let toy = minimize_on_simplices(
        &[2],
        &[vec![vec![0.5, 0.5]]],
        |x| Some(a / x[0][0] + b / x[0][1]),
        &SearchConfig { max_iters: 500, ..Default::default() },
    )
    .unwrap();
    let x_star = a.sqrt() / (a.sqrt() + b.sqrt());
    let toy_err = (toy.best[0][0] - x_star).abs();

    let (wl, ctx) = gpt7b_context();
    let budgets = ctx.budgets();
    let mut ok = toy_err < 1e-3;
    let mut worst_ratio: f64 = 0.0;
    for node in TechNode::ALL {
        let found = search(&wl, &ctx, node, budgets, &SearchConfig::default()).unwrap();
        let random = random_search(&wl, &ctx, node, budgets, 1000, 42).unwrap();
        let exact = std::iter::once(&found.best)
            .chain(found.trace.iter().map(|t| &t.point))
            .all(|p| p.validate().is_ok());
        let ratio = found.time / random.time;
        worst_ratio = worst_ratio.max(ratio);
        ok &= ratio <= 1.05 && exact;
    }
    verdict(
        ok,
        format!("toy |x - 1/3| = {toy_err:.1e}; GPT-7B search / best random, worst over 7 nodes = {worst_ratio:.3}"),
    )
}

fn determinism() -> Check {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = |name: &str| configs.join(name).display().to_string();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("train", vec!["train".into(), "--config".into(), cfg("train_gpt22b.toml")]),
        ("infer", vec!["infer".into(), "--config".into(), cfg("infer_llama13b.toml")]),
        ("mem", vec!["mem".into(), "--config".into(), cfg("train_gpt22b.toml")]),
        ("sweep", vec!["sweep".into(), "--config".into(), cfg("sweep_gpt7b.toml")]),
        ("dse", vec!["dse".into(), "--config".into(), cfg("dse_gpt7b.toml"), "--seed".into(), "11".into()]),
        ("validate", vec!["validate".into()]),
    ];
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for (name, args) in runs {
        let once = || {
            Command::new(env!("CARGO_BIN_EXE_llmperf"))
                .args(&args)
                .args(["--output", "json"])
                .output()
                .expect("spawn llmperf")
        };
        let (a, b) = (once(), once());
        if a.status.success() && a.stdout == b.stdout && !a.stdout.is_empty() {
            same.push(name);
        } else {
            differ.push(name);
        }
    }
    verdict(
        differ.is_empty(),
        format!("byte-identical JSON: {}{}", same.join(", "), if differ.is_empty() { String::new() } else { format!("; differ: {}", differ.join(", ")) }),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, &str, fn() -> Check); 12] = [
        ("1", "formula oracles", formula_oracles),
        ("2", "training validation", training_validation),
        ("3", "inference validation", inference_validation),
        ("4", "bound classification", bound_classification),
        ("5", "compute-bound fraction", compute_fraction),
        ("6", "memory report ordering", memory_ordering),
        ("7a", "node sweep saturation", node_saturation),
        ("7b", "DRAM generation sweep", dram_generations),
        ("7c", "inference DRAM sweep", inference_dram_sweep),
        ("7d", "network speedup", network_speedup),
        ("8", "DSE correctness", dse_correctness),
        ("9", "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {id:<3} {name:<24} {detail}");
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
