//! Command-line front end: run one study config, run a suite manifest, or
//! list the drift catalog.

use std::path::PathBuf;
use std::process::ExitCode;
use stoflow::harness::{self, ExperimentConfig, RunReport};

const USAGE: &str = "usage:
  stoflow run --config PATH [--out DIR] [--seed N] [--threads K]
  stoflow suite --config MANIFEST [--out DIR] [--seed N] [--threads K]
  stoflow list-catalog

exit status is 0 only when every check passes; --threads must not change
any reported number.";

struct Args {
    config: Option<PathBuf>,
    out: Option<String>,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn parse_flags(args: &[String]) -> Result<Args, String> {
    let mut out = Args {
        config: None,
        out: None,
        seed: None,
        threads: None,
    };
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .ok_or_else(|| format!("flag {flag} needs a value"))
        };
        match flag.as_str() {
            "--config" => out.config = Some(PathBuf::from(value()?)),
            "--out" => out.out = Some(value()?.clone()),
            "--seed" => out.seed = Some(value()?.parse().map_err(|e| format!("bad --seed: {e}"))?),
            "--threads" => {
                out.threads = Some(
                    value()?
                        .parse()
                        .map_err(|e| format!("bad --threads: {e}"))?,
                )
            }
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(out)
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &Args, index: usize) {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out {
        cfg.out = Some(format!("{dir}/{}_{index}", cfg.kind.name()));
    }
}

fn print_report(report: &RunReport) {
    for c in &report.checks {
        let status = if c.pass { "pass" } else { "FAIL" };
        match c.std_error {
            Some(se) => println!(
                "[{status}] {}: value {:.6e} tolerance {:.6e} (se {:.2e})",
                c.name, c.value, c.tolerance, se
            ),
            None => println!(
                "[{status}] {}: value {:.6e} tolerance {:.6e}",
                c.name, c.value, c.tolerance
            ),
        }
    }
    println!(
        "{}: {} in {:.2}s",
        report.config.kind.name(),
        if report.all_pass() { "pass" } else { "FAIL" },
        report.wall_clock_seconds
    );
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = argv.first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    match cmd.as_str() {
        "list-catalog" => {
            print!("{}", harness::catalog_listing());
            ExitCode::SUCCESS
        }
        "run" | "suite" => {
            let args = match parse_flags(&argv[1..]) {
                Ok(a) => a,
                Err(e) => {
                    eprintln!("{e}\n{USAGE}");
                    return ExitCode::from(2);
                }
            };
            if let Some(k) = args.threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global()
                {
                    eprintln!("could not size the thread pool: {e}");
                    return ExitCode::from(2);
                }
            }
            let Some(config_path) = &args.config else {
                eprintln!("--config is required\n{USAGE}");
                return ExitCode::from(2);
            };
            if cmd == "run" {
                let mut cfg = match harness::load_config(config_path) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("{e}");
                        return ExitCode::from(2);
                    }
                };
                apply_overrides(&mut cfg, &args, 0);
                match harness::run(&cfg) {
                    Ok(report) => {
                        print_report(&report);
                        if report.all_pass() {
                            ExitCode::SUCCESS
                        } else {
                            ExitCode::from(1)
                        }
                    }
                    Err(e) => {
                        eprintln!("{e}");
                        ExitCode::from(2)
                    }
                }
            } else {
                let text = match std::fs::read_to_string(config_path) {
                    Ok(t) => t,
                    Err(e) => {
                        eprintln!("{}: {e}", config_path.display());
                        return ExitCode::from(2);
                    }
                };
                #[derive(serde::Deserialize)]
                struct Manifest {
                    configs: Vec<String>,
                }
                let manifest: Manifest = match serde_json::from_str(&text) {
                    Ok(m) => m,
                    Err(e) => {
                        eprintln!("bad manifest: {e}");
                        return ExitCode::from(2);
                    }
                };
                if manifest.configs.is_empty() {
                    eprintln!("manifest is empty");
                    return ExitCode::from(2);
                }
                let base = config_path.parent().unwrap_or(std::path::Path::new("."));
                let mut configs = Vec::new();
                for (i, rel) in manifest.configs.iter().enumerate() {
                    match harness::load_config(&base.join(rel)) {
                        Ok(mut cfg) => {
                            apply_overrides(&mut cfg, &args, i);
                            configs.push(cfg);
                        }
                        Err(e) => {
                            eprintln!("{e}");
                            return ExitCode::from(2);
                        }
                    }
                }
                match harness::suite_from_configs(&configs) {
                    Ok(suite) => {
                        for report in &suite.reports {
                            print_report(report);
                        }
                        if let Some(dir) = &args.out {
                            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| {
                                std::fs::write(
                                    format!("{dir}/suite_report.json"),
                                    serde_json::to_vec_pretty(&suite).expect("serializable"),
                                )
                            }) {
                                eprintln!("could not write suite report: {e}");
                                return ExitCode::from(2);
                            }
                        }
                        println!("suite: {}", if suite.all_pass { "pass" } else { "FAIL" });
                        if suite.all_pass {
                            ExitCode::SUCCESS
                        } else {
                            ExitCode::from(1)
                        }
                    }
                    Err(e) => {
                        eprintln!("{e}");
                        ExitCode::from(2)
                    }
                }
            }
        }
        other => {
            eprintln!("unknown command {other}\n{USAGE}");
            ExitCode::from(2)
        }
    }
}
