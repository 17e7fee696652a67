use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obliv::adversary::{obs, obs_lift_d, obs_trace};
use obliv::ast::{parse_program, pretty, Program};
use obliv::harness::{self, render_trace, Opts, Status, Verdict};
use obliv::sem_standard::{nstep_d, nstep_i, terminated, Config, Machine, Out, Trace};
use obliv::surface::{self, check_program, Corpus, Outcome};

#[derive(Parser)]
#[command(name = "obliv", version, about = "Typecheck, run and check programs for probabilistic trace obliviousness")]
struct Cli {
    /// Emit stable tab-separated records instead of prose.
    #[arg(long, global = true)]
    porcelain: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Monad {
    /// Intensional: a tree over coin paths.
    Int,
    /// Denotational: a finite map to exact masses.
    Den,
}

#[derive(Subcommand)]
enum Cmd {
    /// Typecheck a program.
    Check { file: PathBuf },
    /// Sample and print one execution trace.
    Run {
        file: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample random `if` guards instead of getting stuck on them.
        #[arg(long)]
        dynamic: bool,
    },
    /// Print the exact distribution of final configurations.
    Dist {
        file: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long, value_enum, default_value_t = Monad::Den)]
        monad: Monad,
        #[arg(long)]
        dynamic: bool,
    },
    /// Print the adversary's view of a program, or of its traces with --steps.
    Obs {
        file: PathBuf,
        #[arg(long)]
        steps: Option<u32>,
        #[arg(long)]
        dynamic: bool,
    },
    /// Check that two programs have equal observable trace distributions.
    Pmto {
        file1: PathBuf,
        file2: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        dynamic: bool,
    },
    /// Check FLIP-VALUE at every reachable world.
    Preserve {
        file: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        dynamic: bool,
    },
    /// Check the mixed, intensional and denotational runs against each other.
    Sim {
        file: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        dynamic: bool,
    },
    /// Check that every reveal is uniform given its world's history.
    Uniform {
        file: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        dynamic: bool,
    },
    /// Run every expectation in a corpus manifest and print a summary table.
    Corpus {
        /// Defaults to the bundled corpus.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Only run entries whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Also print wall-clock time per entry.
        #[arg(long)]
        timings: bool,
    },
}

/// An error that ends the command with exit code 2.
struct Fatal(String);

fn load(path: &Path) -> Result<Program, Fatal> {
    let src = std::fs::read_to_string(path).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
    parse_program(&src).map_err(|e| Fatal(format!("{}: {e}", path.display())))
}

fn machine(p: &Program, dynamic: bool) -> Machine {
    let m = Machine::for_program(p);
    if dynamic {
        m.permissive()
    } else {
        m
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Fatal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<bool, Fatal> {
    let porcelain = cli.porcelain;
    match &cli.cmd {
        Cmd::Check { file } => check(&load(file)?, porcelain),
        Cmd::Run { file, steps, seed, dynamic } => run(&load(file)?, *steps, *seed, *dynamic, porcelain),
        Cmd::Dist { file, steps, monad, dynamic } => dist(&load(file)?, *steps, *monad, *dynamic, porcelain),
        Cmd::Obs { file, steps, dynamic } => observe(&load(file)?, *steps, *dynamic, porcelain),
        Cmd::Pmto { file1, file2, steps, dynamic } => {
            let v = harness::check_pmto(&load(file1)?, &load(file2)?, *steps, Opts { dynamic: *dynamic });
            Ok(report(&v, porcelain))
        }
        Cmd::Preserve { file, steps, dynamic } => {
            Ok(report(&harness::check_preservation(&load(file)?, *steps, Opts { dynamic: *dynamic }), porcelain))
        }
        Cmd::Sim { file, steps, dynamic } => {
            Ok(report(&harness::check_simulation(&load(file)?, *steps, Opts { dynamic: *dynamic }), porcelain))
        }
        Cmd::Uniform { file, steps, dynamic } => {
            Ok(report(&harness::check_reveal_uniformity(&load(file)?, *steps, Opts { dynamic: *dynamic }), porcelain))
        }
        Cmd::Corpus { manifest, filter, timings } => {
            corpus(manifest.as_deref(), filter.as_deref(), *timings, porcelain)
        }
    }
}

fn report(v: &Verdict, porcelain: bool) -> bool {
    if porcelain {
        println!("verdict\t{}\tsteps={}\tcoins={}", v.status, v.steps_used, v.coins_used);
        if let Some(w) = &v.witness {
            for line in w.text.lines() {
                println!("witness\t{line}");
            }
            if let Some((a, b)) = &w.probs {
                println!("probs\t{a}\t{b}");
            }
        }
    } else {
        print!("{v}");
    }
    v.is_pass()
}

fn check(p: &Program, porcelain: bool) -> Result<bool, Fatal> {
    match check_program(p) {
        Ok(t) => {
            if porcelain {
                println!("typecheck\tok\t{t}");
            } else {
                println!("ok: {t}");
            }
            Ok(true)
        }
        Err(e) => {
            if porcelain {
                println!("typecheck\terror\t{}\t{}", e.rule, e.detail);
            } else {
                println!("type error: {e}");
            }
            Ok(false)
        }
    }
}

/// Samples one world by drawing each requested bit from a seeded generator.
fn run(p: &Program, steps: u32, seed: u64, dynamic: bool, porcelain: bool) -> Result<bool, Fatal> {
    let m = machine(p, dynamic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trace::single(Config::initial(&p.expr));
    for n in 0..steps {
        if terminated(&t) {
            break;
        }
        let st = m.step(n, t.last()).map_err(|e| Fatal(e.to_string()))?;
        let c = match st.out {
            Out::Det(c) => c,
            Out::Sample { sources, build, .. } => {
                let bits: Vec<bool> = sources.iter().map(|_| rng.gen()).collect();
                build(&bits)
            }
        };
        t = t.push(c, st.fresh);
    }
    if porcelain {
        for (i, c) in t.configs().iter().enumerate() {
            println!("config\t{i}\t{c}");
        }
    } else {
        println!("{}", render_trace(&t));
    }
    Ok(true)
}

fn dist(p: &Program, steps: u32, monad: Monad, dynamic: bool, porcelain: bool) -> Result<bool, Fatal> {
    let m = machine(p, dynamic);
    let c = Config::initial(&p.expr);
    let d = match monad {
        Monad::Den => nstep_d(&m, steps, &c).map_err(|e| Fatal(e.to_string()))?,
        Monad::Int => nstep_i(&m, steps, &c).map_err(|e| Fatal(e.to_string()))?.to_dmap(),
    };
    let finals = d.map(|t| t.last().clone()).normalize();
    let mut rows: Vec<(String, String)> =
        finals.entries().iter().map(|(c, w)| (c.to_string(), w.to_string())).collect();
    rows.sort();
    for (c, w) in rows {
        if porcelain {
            println!("outcome\t{w}\t{c}");
        } else {
            println!("{w:>8}  {c}");
        }
    }
    Ok(true)
}

fn observe(p: &Program, steps: Option<u32>, dynamic: bool, porcelain: bool) -> Result<bool, Fatal> {
    let Some(n) = steps else {
        println!("{}", pretty(&obs(&p.expr)));
        return Ok(true);
    };
    let d = nstep_d(&machine(p, dynamic), n, &Config::initial(&p.expr)).map_err(|e| Fatal(e.to_string()))?;
    let view = obs_lift_d(&d);
    let mut rows: Vec<(String, String)> = view
        .entries()
        .iter()
        .map(|(t, w)| {
            let t = obs_trace(t);
            let text = if porcelain {
                t.configs().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ; ")
            } else {
                render_trace(&t)
            };
            (text, w.to_string())
        })
        .collect();
    rows.sort();
    for (t, w) in rows {
        if porcelain {
            println!("observation\t{w}\t{t}");
        } else {
            println!("mass {w}:\n{t}\n");
        }
    }
    Ok(true)
}

fn corpus(manifest: Option<&Path>, filter: Option<&str>, timings: bool, porcelain: bool) -> Result<bool, Fatal> {
    let c: Corpus = match manifest {
        Some(m) => surface::load_manifest(m),
        None => surface::corpus(),
    }
    .map_err(|e| Fatal(e.to_string()))?;
    let keep = |name: &str| filter.map_or(true, |f| name.contains(f));
    let mut all_ok = true;
    let mut rows: Vec<Outcome> = Vec::new();
    let mut times = Vec::new();
    for e in c.programs.iter().filter(|e| keep(&e.name)) {
        let start = Instant::now();
        let outs = surface::run_entry(e).map_err(|e| Fatal(e.to_string()))?;
        times.push((e.name.clone(), start.elapsed()));
        rows.extend(outs);
    }
    for pair in c.pairs.iter().filter(|p| keep(&p.left) || keep(&p.right)) {
        let start = Instant::now();
        let out = surface::run_pair(&c, pair).map_err(|e| Fatal(e.to_string()))?;
        times.push((out.subject.clone(), start.elapsed()));
        rows.push(out);
    }
    if !porcelain {
        println!("{:<44} {:<10} {:<14} {:<13} {:>5} {:>5}  result", "subject", "check", "expected", "actual", "steps", "coins");
    }
    for o in &rows {
        all_ok &= o.matched;
        let actual = match (&o.status, &o.rule) {
            (Status::Fail, Some(rule)) => format!("fail:{rule}"),
            (s, _) => s.to_string().to_lowercase(),
        };
        let verdict = if o.matched { "ok" } else { "MISMATCH" };
        if porcelain {
            println!(
                "result\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                o.subject, o.check, o.expected, actual, o.steps_used, o.coins_used, verdict
            );
        } else {
            println!(
                "{:<44} {:<10} {:<14} {:<13} {:>5} {:>5}  {verdict}",
                o.subject,
                o.check.to_string(),
                o.expected.to_string(),
                actual,
                o.steps_used,
                o.coins_used
            );
            if !o.matched {
                if let Some(d) = &o.detail {
                    for line in d.lines().take(12) {
                        println!("    {line}");
                    }
                }
            }
        }
    }
    let matched = rows.iter().filter(|o| o.matched).count();
    if porcelain {
        println!("summary\t{matched}\t{}", rows.len());
    } else {
        println!("\n{matched}/{} expectations matched", rows.len());
        if timings {
            for (n, d) in times {
                println!("  {n}: {:.2?}", d);
            }
        }
    }
    Ok(all_ok)
}
