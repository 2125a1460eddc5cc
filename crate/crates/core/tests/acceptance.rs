//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one `criterion N ... PASS|FAIL` line whatever the
//! outcome; the process exits non-zero if any criterion fails.
//!
//! Criteria 6 to 8 train on the frozen fixture in `configs/fixture.cfg`.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use crossclust::config::{extract, parse_key_values};
use crossclust::data::{generate, SynthConfig};
use crossclust::losses::{
    ccm_loss, contrastive, kl_decomposition, ocm_ce, one_hot, pairwise_labels, reconstruction_mse,
    softmax_columns_backward, supervised_ce,
};
use crossclust::metrics::{ari, clustering_accuracy, uniformity, MetricsRecord};
use crossclust::numerics::{check_gradient, softmax_columns, Matrix, PredictionMatrix, SeededRng};
use crossclust::pseudo_label::MemoryBank;
use crossclust::sinkhorn::{round_to_labels, solve_balanced, TransportConfig};
use crossclust::trainer::{
    finetune_from, pretrain, run_experiment, write_history_csv, Ablation, FinetuneOptions, TrainConfig, TrainData,
};

const SEEDS: u64 = 5;
const K: usize = 8;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(id: usize, name: &'static str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            name,
            pass,
            detail: detail.into(),
        }
    }

    fn print(&self) {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        println!("criterion {} ({}): {tag}  {}", self.id, self.name, self.detail);
    }
}

fn random_predictions(k: usize, n: usize, rng: &mut SeededRng) -> PredictionMatrix<f64> {
    softmax_columns(&Matrix::from_fn(k, n, |_, _| rng.normal()))
}

fn sinkhorn_correctness() -> Verdict {
    let cfg = TransportConfig::default();
    let mut worst_err = 0.0f64;
    let mut worst_iters = 0;
    let mut failures = 0;
    let mut elapsed = Duration::ZERO;
    for seed in 0..100 {
        let p = random_predictions(64, 512, &mut SeededRng::new(seed));
        let t = Instant::now();
        let q = solve_balanced(&p, &cfg).expect("solver runs");
        elapsed += t.elapsed();
        let err = q.row_marginal_err.max(q.col_marginal_err);
        worst_err = worst_err.max(err);
        worst_iters = worst_iters.max(q.iters_used);
        if !q.converged || err > 1e-6 || q.iters_used > 1000 {
            failures += 1;
        }
    }
    let secs = elapsed.as_secs_f64();
    Verdict::new(
        1,
        "sinkhorn correctness",
        failures == 0 && secs < 2.0,
        format!("K=64 N=512 x100: worst marginal {worst_err:.1e}, worst iters {worst_iters}, {secs:.2}s, {failures} failures"),
    )
}

fn cross_entropy(p: &PredictionMatrix<f64>, labels: &[usize]) -> f64 {
    let m = p.as_matrix();
    -labels.iter().enumerate().map(|(n, &y)| m[(y, n)].ln()).sum::<f64>() / labels.len() as f64
}

/// Smallest cross-entropy over every labeling with exactly N/K samples per cluster.
fn balanced_oracle(p: &PredictionMatrix<f64>) -> f64 {
    let (k, n) = (p.num_classes(), p.num_samples());
    let cap = n / k;
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        let mut counts = vec![0usize; k];
        for l in labels.iter_mut() {
            *l = c % k;
            counts[*l] += 1;
            c /= k;
        }
        if counts.iter().all(|&x| x == cap) {
            best = best.min(cross_entropy(p, &labels));
        }
    }
    best
}

fn oracle_equivalence() -> Verdict {
    let shapes = [(2, 2), (2, 4), (2, 6), (2, 8), (3, 3), (3, 6)];
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    let mut misses = 0;
    for trial in 0..200 {
        let (k, n) = shapes[trial % shapes.len()];
        let p = random_predictions(k, n, &mut rng);
        let q = solve_balanced(&p, &TransportConfig::default()).expect("solver runs");
        let labels = round_to_labels(&q, true);
        let (_, e_round, _) = kl_decomposition(&one_hot(&labels, k), &p).expect("shapes agree");
        let e_min = balanced_oracle(&p);
        let rel = (e_round - e_min) / e_min;
        worst = worst.max(rel);
        if rel > 0.01 {
            misses += 1;
        }
    }
    Verdict::new(
        2,
        "oracle equivalence",
        misses == 0,
        format!("200 trials N<=8 K in {{2,3}}: worst relative excess {:.3}%, {misses} over 1%", 100.0 * worst),
    )
}

fn kl_identity() -> Verdict {
    let mut rng = SeededRng::new(7);
    let mut worst = 0.0f64;
    let mut one_hot_exact = true;
    for _ in 0..200 {
        let k = 2 + rng.below(6);
        let n = 1 + rng.below(20);
        let q = random_predictions(k, n, &mut rng);
        let p = random_predictions(k, n, &mut rng);
        let (d, e, h) = kl_decomposition(q.as_matrix(), &p).expect("shapes agree");
        worst = worst.max((d - (e - h)).abs());
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let (d1, e1, h1) = kl_decomposition(&one_hot(&labels, k), &p).expect("shapes agree");
        one_hot_exact &= d1 == e1 && h1 == 0.0;
    }
    Verdict::new(
        3,
        "KL identity",
        worst <= 1e-12 && one_hot_exact,
        format!("200 random pairs: max |D-(E-H)| {worst:.1e}; one-hot D == E exactly: {one_hot_exact}"),
    )
}

fn gradient_suite() -> Verdict {
    const H: f64 = 1e-5;
    let mut rng = SeededRng::new(99);
    let mut worst = [0.0f64; 5];
    for _ in 0..40 {
        let n = 2 + rng.below(3);
        let k = 2 + rng.below(2);
        let d = 2 + rng.below(4);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let mat = |x: &[f64], r: usize, c: usize| Matrix::new(r, c, x.to_vec()).unwrap();

        let logits = Matrix::from_fn(k, n, |_, _| 2.0 * rng.normal());
        let err = check_gradient(
            |x| supervised_ce(&mat(x, k, n), &labels).unwrap().value,
            |x| supervised_ce(&mat(x, k, n), &labels).unwrap().grad.into_data(),
            logits.data(),
            H,
        );
        worst[0] = worst[0].max(err);

        let target = Matrix::from_fn(n, d, |_, _| rng.normal());
        let recon = Matrix::from_fn(n, d, |_, _| rng.normal());
        let err = check_gradient(
            |x| reconstruction_mse(&mat(x, n, d), &target).unwrap().value,
            |x| reconstruction_mse(&mat(x, n, d), &target).unwrap().grad.into_data(),
            recon.data(),
            H,
        );
        worst[1] = worst[1].max(err);

        let slots = n + 1 + rng.below(3);
        let mut bank = MemoryBank::new(slots, d);
        bank.update(
            &(0..slots).collect::<Vec<_>>(),
            &Matrix::from_fn(slots, d, |_, _| rng.normal()),
        )
        .unwrap();
        let idx: Vec<usize> = rng.permutation(slots).into_iter().take(n).collect();
        let z = Matrix::from_fn(n, d, |_, _| rng.normal());
        let err = check_gradient(
            |x| contrastive(&mat(x, n, d), &idx, &bank, 7.0).unwrap().value,
            |x| contrastive(&mat(x, n, d), &idx, &bank, 7.0).unwrap().grad.into_data(),
            z.data(),
            H,
        );
        worst[2] = worst[2].max(err);

        let err = check_gradient(
            |x| ocm_ce(&mat(x, k, n), &labels).unwrap().value,
            |x| ocm_ce(&mat(x, k, n), &labels).unwrap().grad.into_data(),
            logits.data(),
            H,
        );
        worst[3] = worst[3].max(err);

        // the pairwise loss is checked with respect to the predictions
        // themselves and through the column softmax
        let partner: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let g = pairwise_labels(&partner);
        let pred = random_predictions(k, n, &mut rng);
        let loose = |x: &[f64]| PredictionMatrix::from_matrix(mat(x, k, n), 1e-3).unwrap();
        let err = check_gradient(
            |x| ccm_loss(&loose(x), &g).unwrap().value,
            |x| ccm_loss(&loose(x), &g).unwrap().grad.into_data(),
            pred.as_matrix().data(),
            H,
        );
        worst[4] = worst[4].max(err);
        let err = check_gradient(
            |x| ccm_loss(&softmax_columns(&mat(x, k, n)), &g).unwrap().value,
            |x| {
                let p = softmax_columns(&mat(x, k, n));
                let l = ccm_loss(&p, &g).unwrap();
                softmax_columns_backward(&p, &l.grad).unwrap().into_data()
            },
            logits.data(),
            H,
        );
        worst[4] = worst[4].max(err);
    }
    let names = ["supervised_ce", "reconstruction_mse", "contrastive", "ocm_ce", "ccm_loss"];
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Verdict::new(
        4,
        "gradient suite",
        worst.iter().all(|&w| w <= 1e-4),
        format!("40 random toys, worst relative error: {}", detail.join(", ")),
    )
}

fn exhaustive_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let m = kp.max(kt);
    let mut counts = vec![vec![0usize; m]; m];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        best = best.max((0..m).map(|i| counts[i][p[i]]).sum::<usize>());
    });
    best as f64 / pred.len() as f64
}

fn permute(items: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// Adjusted Rand index from the four pair counts.
fn all_pairs_ari(pred: &[usize], truth: &[usize]) -> Option<f64> {
    let (mut ss, mut sd, mut ds, mut dd) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    (denom != 0.0).then(|| 2.0 * (ss * dd - sd * ds) / denom)
}

fn metric_oracles() -> Verdict {
    let mut rng = SeededRng::new(5);
    let mut acc_mismatch = 0;
    let mut ari_worst = 0.0f64;
    for _ in 0..300 {
        let n = 2 + rng.below(29);
        let kp = 1 + rng.below(5);
        let kt = 1 + rng.below(5);
        let pred: Vec<usize> = (0..n).map(|_| rng.below(kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.below(kt)).collect();
        if clustering_accuracy(&pred, &truth).unwrap() != exhaustive_accuracy(&pred, &truth) {
            acc_mismatch += 1;
        }
        if let Some(oracle) = all_pairs_ari(&pred, &truth) {
            ari_worst = ari_worst.max((ari(&pred, &truth).unwrap() - oracle).abs());
        }
    }
    let labels: Vec<usize> = (0..51 * 20).map(|i| i % 51).collect();
    let u51 = uniformity(&labels, 51);
    Verdict::new(
        5,
        "metric oracles",
        acc_mismatch == 0 && ari_worst <= 1e-12 && (u51 - 3.93).abs() <= 0.005,
        format!(
            "300 labelings K<=5 N<=30: ACC mismatches {acc_mismatch}, max ARI diff {ari_worst:.1e}; uniformity(51 equal) {u51:.4}"
        ),
    )
}

fn fixture() -> (SynthConfig, TrainConfig) {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "fixture.cfg"].iter().collect();
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    let kv = parse_key_values(&text).expect("fixture parses");
    (extract(&kv).expect("data keys"), extract(&kv).expect("training keys"))
}

/// One finetuning arm: modules, label mode and whether the base losses stay on.
#[derive(Clone, Copy)]
struct Arm {
    ablation: Ablation,
    balance: bool,
    base: bool,
}

const BM: Arm = Arm { ablation: Ablation::Bm, balance: true, base: true };
const OCM: Arm = Arm { ablation: Ablation::Ocm, balance: true, base: true };
const FULL: Arm = Arm { ablation: Ablation::Full, balance: true, base: true };
const ARGMAX_ONLY: Arm = Arm { ablation: Ablation::Ocm, balance: false, base: false };
const BALANCED_ONLY: Arm = Arm { ablation: Ablation::Ocm, balance: true, base: false };
const ARMS: [Arm; 5] = [BM, OCM, FULL, ARGMAX_ONLY, BALANCED_ONLY];

struct Campaign {
    /// `results[arm][seed]` holds both branches' final metrics.
    results: Vec<Vec<[MetricsRecord; 2]>>,
    /// Pretraining plus finetuning wall time of the slowest single run.
    slowest_run: Duration,
}

impl Campaign {
    fn run() -> Self {
        let (synth, base) = fixture();
        let mut results = vec![Vec::new(); ARMS.len()];
        let mut slowest_run = Duration::ZERO;
        for seed in 0..SEEDS {
            let bundle = generate(&SynthConfig { seed: synth.seed + seed, ..synth.clone() }).expect("fixture data");
            let data = TrainData::<f64>::from_bundle(&bundle).expect("fixture data");
            let cfg = TrainConfig { seed: base.seed + seed, ..base.clone() };
            let t = Instant::now();
            let (pretrained, _) = pretrain(&data, &cfg).expect("pretraining");
            let pretrain_time = t.elapsed();
            for (a, arm) in ARMS.iter().enumerate() {
                let cfg = TrainConfig { base_losses_in_finetune: arm.base, ..cfg.clone() };
                let opts = FinetuneOptions { ablation: arm.ablation, balance: arm.balance };
                let t = Instant::now();
                let (_, report) = finetune_from(&pretrained, &data, &cfg, opts, |_, _, _| Ok(())).expect("finetuning");
                slowest_run = slowest_run.max(pretrain_time + t.elapsed());
                results[a].push([report.final_metrics[0], report.final_metrics[1]]);
            }
        }
        Self { results, slowest_run }
    }

    fn arm(&self, arm: usize) -> &[[MetricsRecord; 2]] {
        &self.results[arm]
    }

    /// Seed-averaged ACC of each branch, in points.
    fn branch_acc(&self, arm: usize) -> [f64; 2] {
        let runs = self.arm(arm);
        [0, 1].map(|b| 100.0 * runs.iter().map(|r| r[b].acc).sum::<f64>() / runs.len() as f64)
    }

    /// Seed-averaged ACC of the two-branch mean, in points.
    fn mean_acc(&self, arm: usize) -> f64 {
        let [a, b] = self.branch_acc(arm);
        (a + b) / 2.0
    }

    /// Seed-averaged absolute branch gap, in points.
    fn mean_gap(&self, arm: usize) -> f64 {
        let runs = self.arm(arm);
        100.0 * runs.iter().map(|r| (r[0].acc - r[1].acc).abs()).sum::<f64>() / runs.len() as f64
    }
}

fn uniformities(runs: &[[MetricsRecord; 2]]) -> String {
    runs.iter()
        .map(|r| format!("{:.2}/{:.2}", r[0].uniformity, r[1].uniformity))
        .collect::<Vec<_>>()
        .join(" ")
}

fn degeneration(c: &Campaign) -> Verdict {
    let ln_k = (K as f64).ln();
    let off = c.arm(3);
    let degenerate = off
        .iter()
        .filter(|r| r.iter().all(|m| m.uniformity < 0.5 * ln_k))
        .count();
    let balanced_runs: Vec<&[MetricsRecord; 2]> = c.arm(4).iter().chain(c.arm(2)).collect();
    let balanced = balanced_runs
        .iter()
        .all(|r| r.iter().all(|m| m.uniformity >= 0.95 * ln_k));
    let fast = c.slowest_run.as_secs_f64() <= 300.0;
    Verdict::new(
        6,
        "degeneration",
        degenerate >= 4 && balanced && fast,
        format!(
            "off (no base losses) {degenerate}/5 below {:.2} [{}]; on (no base losses) [{}], full [{}], all >= {:.3}: {balanced}; slowest run {:.1}s",
            0.5 * ln_k,
            uniformities(off),
            uniformities(c.arm(4)),
            uniformities(c.arm(2)),
            0.95 * ln_k,
            c.slowest_run.as_secs_f64()
        ),
    )
}

fn ablation_ordering(c: &Campaign) -> Verdict {
    let (bm, ocm, full) = (c.mean_acc(0), c.mean_acc(1), c.mean_acc(2));
    Verdict::new(
        7,
        "ablation ordering",
        ocm >= bm + 3.0 && full >= ocm + 3.0,
        format!(
            "mean ACC over 5 seeds and both branches: BM {bm:.1}, BM+OCM {ocm:.1} ({:+.1}), BM+OCM+CCM {full:.1} ({:+.1})",
            ocm - bm,
            full - ocm
        ),
    )
}

fn branch_consistency(c: &Campaign) -> Verdict {
    let (full_gap, bm_gap) = (c.mean_gap(2), c.mean_gap(0));
    let [f0, f1] = c.branch_acc(2);
    let [b0, b1] = c.branch_acc(0);
    Verdict::new(
        8,
        "branch consistency",
        full_gap <= 2.0 && bm_gap >= 5.0,
        format!(
            "mean |ACC_B0 - ACC_B1|: full {full_gap:.1} (B0 {f0:.1}, B1 {f1:.1}), BM {bm_gap:.1} (B0 {b0:.1}, B1 {b1:.1})"
        ),
    )
}

fn determinism() -> Verdict {
    let (synth, cfg) = fixture();
    let data = TrainData::<f64>::from_bundle(&generate(&synth).expect("fixture data")).expect("fixture data");
    let cfg = TrainConfig { eval_every: 10, ..cfg };
    let opts = FinetuneOptions { ablation: Ablation::Full, balance: true };
    let histories: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let report = run_experiment(&data, &cfg, opts).expect("training");
            let mut csv = Vec::new();
            write_history_csv(&mut csv, &report.history).expect("csv");
            csv
        })
        .collect();
    let rows = histories[0].iter().filter(|&&b| b == b'\n').count();
    Verdict::new(
        9,
        "determinism",
        histories[0] == histories[1],
        format!("two full runs, {rows} history lines, byte-identical: {}", histories[0] == histories[1]),
    )
}

fn main() {
    let mut verdicts = vec![
        sinkhorn_correctness(),
        oracle_equivalence(),
        kl_identity(),
        gradient_suite(),
        metric_oracles(),
    ];
    let campaign = Campaign::run();
    verdicts.push(degeneration(&campaign));
    verdicts.push(ablation_ordering(&campaign));
    verdicts.push(branch_consistency(&campaign));
    verdicts.push(determinism());
    for v in &verdicts {
        v.print();
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("acceptance: {} of {} criteria pass", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
