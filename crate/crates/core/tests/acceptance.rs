//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any fails. The training criteria use the default configuration and take
//! on the order of an hour on a single core.

#[path = "common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use lphom_core::config::RunConfig;
use lphom_core::label::ConditionLabel;
use lphom_core::pipeline::{self, EvalReport, LdmReport, VaeReport};
use lphom_tensor::check::kernel_suite;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn gradients() -> Outcome {
    let kernels = match kernel_suite() {
        Ok(k) => k,
        Err(e) => return outcome(false, format!("kernel suite failed: {e}")),
    };
    let (worst_name, worst) = kernels
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_err))
        .fold(("", 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    let unet = common::unet_chain_report().max_rel_err;
    let vae = common::vae_chain_report().max_rel_err;
    outcome(
        worst <= 1e-4 && unet <= 1e-3 && vae <= 1e-3,
        format!("{} kernels, worst {worst:.2e} ({worst_name}); U-Net chain {unet:.2e}; VAE chain {vae:.2e}", kernels.len()),
    )
}

fn forward_law() -> Outcome {
    let (closed, chained) = common::forward_process_mc(10_000);
    outcome(
        closed.ok() && chained.ok(),
        format!(
            "closed form: mean z {:.2}, var {:.3}; chained: mean z {:.2}, var {:.3}",
            closed.mean_z, closed.var_rel, chained.mean_z, chained.var_rel
        ),
    )
}

fn point_mass() -> Outcome {
    let err = common::point_mass_ddim(&[1, 10, 50]);
    outcome(err <= 1e-4, format!("worst relative error {err:.2e}"))
}

fn metrics() -> Outcome {
    let m = common::metric_oracles();
    outcome(
        m.ok(),
        format!(
            "fid(a,a) {:.1e}; shift {:.2}%; asym {:.1e}; sqrt {:.1e}; ms_ssim(x,x) {}; ssim asym {:.1e}",
            m.fid_self,
            100.0 * m.fid_shift_rel,
            m.fid_asymmetry,
            m.sqrt_rel,
            m.ms_ssim_self,
            m.ssim_asymmetry
        ),
    )
}

fn training(vae: &VaeReport, ldm: &LdmReport) -> Outcome {
    outcome(
        vae.val_mse <= 0.005 && ldm.val_loss <= 0.8,
        format!(
            "VAE val MSE {:.5}; held-out eps-loss {:.3} (untrained {:.3})",
            vae.val_mse, ldm.val_loss, ldm.untrained_val_loss
        ),
    )
}

fn realism(eval: &EvalReport) -> Outcome {
    let cells = eval.fid.iter().filter(|(_, d)| d.is_some()).count();
    let failing: Vec<String> = eval
        .fid
        .iter()
        .filter_map(|(l, d)| d.as_ref().filter(|d| !d.passes()).map(|_| l.to_string()))
        .collect();
    match eval.realism_pass_rate() {
        Some(rate) => outcome(
            rate >= 0.8,
            format!("{:.0}% of {cells} cells pass; failing: [{}]", 100.0 * rate, failing.join(", ")),
        ),
        None => outcome(false, "no cell had FID details"),
    }
}

fn diversity(eval: &EvalReport) -> Outcome {
    let mut out_of_range = Vec::new();
    let mut n = 0;
    for (l, d) in eval.diversity.iter() {
        if let Some(d) = d {
            n += 1;
            if !(d.mean > 0.3 && d.mean < 0.99) {
                out_of_range.push(format!("{l} {d}"));
            }
        }
    }
    outcome(
        n > 0 && out_of_range.is_empty(),
        format!("{n} cells reported; out of range: [{}]", out_of_range.join(", ")),
    )
}

fn extrapolation(cfg: &RunConfig, eval: &EvalReport) -> Outcome {
    let held: Vec<ConditionLabel> = ConditionLabel::all().filter(|&l| cfg.is_held_out(l)).collect();
    let acc = eval.classifier;
    let pooled = eval.pooled_match(&held).unwrap_or(0.0);
    outcome(
        acc.pathology >= 0.95 && acc.modality >= 0.95 && pooled >= 0.5,
        format!(
            "classifier pathology {:.3}, modality {:.3}; held-out joint match {:.3} over {} cells",
            acc.pathology,
            acc.modality,
            pooled,
            held.len()
        ),
    )
}

const ARTIFACTS: [&str; 17] = [
    "data/manifest.tsv",
    "label_audit.csv",
    "loss_vae.csv",
    "vae_metrics.csv",
    "vae.ckpt",
    "loss_ldm.csv",
    "ldm_metrics.csv",
    "ldm.ckpt",
    "grid.png",
    "fid_table.csv",
    "fid_table.txt",
    "fid_details.csv",
    "msssim_table.csv",
    "msssim_table.txt",
    "extrapolation.csv",
    "extrapolation.txt",
    "samples/Healthy_FLAIR/0000.png",
];

fn reduced(out: &Path) -> RunConfig {
    let text = format!(
        "seed = 11\nscale = 0.02\nvae_steps = 60\nunet_steps = 60\nddim_steps = 10\nsamples_per_cell = 8\n\
         msssim_pairs = 10\nclassifier_per_cell = 5\nclassifier_steps = 40\nout = {}\n",
        out.display()
    );
    RunConfig::parse(&text).expect("valid config")
}

fn determinism() -> Outcome {
    let (a, b) = (work_dir("repeat_a"), work_dir("repeat_b"));
    for dir in [&a, &b] {
        if let Err(e) = pipeline::run_all(&reduced(dir), &pipeline::quiet) {
            return outcome(false, format!("run failed: {e}"));
        }
    }
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|f| match (std::fs::read(a.join(f)), std::fs::read(b.join(f))) {
            (Ok(x), Ok(y)) => x != y,
            _ => true,
        })
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts compared; differing or missing: [{}]", ARTIFACTS.len(), differing.join(", ")),
    )
}

fn report(id: usize, name: &str, started: Instant, o: &Outcome) {
    println!(
        "criterion {id} {name}: {} ({}) [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() -> ExitCode {
    let mut all = true;
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(id, name, t, &o);
        all &= o.pass;
    };

    run(1, "gradient fidelity", &mut gradients);
    run(2, "forward-process law", &mut forward_law);
    run(3, "DDIM point-mass oracle", &mut point_mass);
    run(4, "metric oracles", &mut metrics);

    let cfg = {
        let mut c = RunConfig::default();
        c.out = work_dir("default");
        c
    };
    let t = Instant::now();
    match pipeline::run_all(&cfg, &|msg| eprintln!("  {msg}")) {
        Ok((vae, ldm, eval)) => {
            println!("default run finished in {:.0} s", t.elapsed().as_secs_f64());
            println!("MS-SSIM (mean ± std):");
            for line in std::fs::read_to_string(cfg.out.join("msssim_table.txt")).unwrap_or_default().lines() {
                println!("  {line}");
            }
            run(5, "training effectiveness", &mut || training(&vae, &ldm));
            run(6, "realism ordering", &mut || realism(&eval));
            run(7, "diversity bounds", &mut || diversity(&eval));
            run(8, "extrapolation", &mut || extrapolation(&cfg, &eval));
        }
        Err(e) => {
            for (id, name) in [(5, "training effectiveness"), (6, "realism ordering"), (7, "diversity bounds"), (8, "extrapolation")] {
                run(id, name, &mut || outcome(false, format!("default run failed: {e}")));
            }
        }
    }

    run(9, "determinism", &mut determinism);

    if all {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
