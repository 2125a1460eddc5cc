//! Runs every finetuning arm on a synthetic fixture and prints per-branch
//! metrics. Usage: `fixture_probe [config-file] [seeds] [verbose] [arms]`,
//! where `arms` is a comma-separated list of arm indices.

use std::time::Instant;

use crossclust::config::{extract, parse_key_values};
use crossclust::data::{generate, SynthConfig};
use crossclust::metrics::clustering_accuracy;
use crossclust::numerics::norm;
use crossclust::trainer::{finetune_from, pretrain, Ablation, FinetuneOptions, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let kv = match args.get(1) {
        Some(path) => parse_key_values(&std::fs::read_to_string(path)?)?,
        None => Default::default(),
    };
    let seeds: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let verbose = args.get(3).is_some_and(|v| v != "0");
    let only: Option<Vec<usize>> = args
        .get(4)
        .map(|a| a.split(',').map(|i| i.parse()).collect())
        .transpose()?;
    let synth: SynthConfig = extract(&kv)?;
    let base: TrainConfig = extract(&kv)?;
    // (ablation, balance, base losses during finetuning)
    let arms = [
        (Ablation::Bm, true, true),
        (Ablation::Ocm, true, true),
        (Ablation::Full, true, true),
        (Ablation::Ocm, false, false),
        (Ablation::Ocm, true, false),
    ];
    let mut sums = vec![[0.0f64; 2]; arms.len()];
    for seed in 0..seeds {
        let bundle = generate(&SynthConfig { seed: synth.seed + seed, ..synth.clone() })?;
        let truth = bundle.target_truth()?.to_vec();
        let data = TrainData::<f64>::from_bundle(&bundle)?;
        let cfg = TrainConfig { seed: base.seed + seed, ..base.clone() };
        let t = Instant::now();
        let (pre, hist) = pretrain(&data, &cfg)?;
        let last: Vec<String> = hist
            .iter()
            .rev()
            .take(2)
            .rev()
            .map(|r| format!("{:.3}", r.metrics.map(|m| m.acc).unwrap_or(f64::NAN)))
            .collect();
        println!("seed {seed}: pretrain {:.1}s kmeans acc {last:?}", t.elapsed().as_secs_f64());
        if verbose {
            for s in &pre {
                let f = s.student_features(&s.view(&data.target_x)?)?;
                let mean_norm = f.row_iter().map(norm).sum::<f64>() / f.rows() as f64;
                println!("  branch {:?} mean raw feature norm {mean_norm:.3}", s.id);
            }
        }
        for (a, &(ablation, balance, base_losses)) in arms.iter().enumerate() {
            if only.as_ref().is_some_and(|o| !o.contains(&a)) {
                continue;
            }
            let cfg = TrainConfig { base_losses_in_finetune: base_losses, ..cfg.clone() };
            let t = Instant::now();
            let mut pl = Vec::new();
            let (_, rep) = finetune_from(&pre, &data, &cfg, FinetuneOptions { ablation, balance }, |e, l0, l1| {
                pl.push((e, clustering_accuracy(l0, &truth)?, clustering_accuracy(l1, &truth)?));
                Ok(())
            })?;
            let m = &rep.final_metrics;
            sums[a][0] += m[0].acc;
            sums[a][1] += m[1].acc;
            println!(
                "  {ablation:?} balance={balance} base={base_losses}: acc {:.3}/{:.3} unif {:.2}/{:.2} ({:.1}s)",
                m[0].acc,
                m[1].acc,
                m[0].uniformity,
                m[1].uniformity,
                t.elapsed().as_secs_f64()
            );
            if verbose {
                for r in rep.history.iter().filter(|r| r.metrics.is_some()) {
                    let m = r.metrics.unwrap_or_default();
                    let l = r.losses;
                    println!(
                        "    e{} b{} acc {:.3} unif {:.2} | sup {:.3} dec {:.3} cont {:.3} ocm {:.3} ccm {:.3}",
                        r.epoch, r.branch, m.acc, m.uniformity, l.sup, l.dec, l.cont, l.ocm, l.ccm
                    );
                }
                let pls: Vec<String> = pl.iter().map(|(e, a, b)| format!("{e}:{a:.2}/{b:.2}")).collect();
                println!("    pseudo {}", pls.join(" "));
            }
        }
    }
    println!("means over {seeds} seeds:");
    for (a, &(ablation, balance, base_losses)) in arms.iter().enumerate() {
        let (x, y) = (sums[a][0] / seeds as f64, sums[a][1] / seeds as f64);
        println!("  {ablation:?} balance={balance} base={base_losses}: {x:.3}/{y:.3} mean {:.3}", (x + y) / 2.0);
    }
    Ok(())
}
