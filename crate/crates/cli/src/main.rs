use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sdmefem::basis1d::{conditioning_csv, conditioning_report, sparsity_csv, sparsity_report, BasisTag, DEFAULT_K};
use sdmefem::config::{parse_config, MeshSource, RunConfig};
use sdmefem::scenario::{benchmark_compare, compare_csv, run_scenario, scenario_config, scenario_text, ReportBundle, SCENARIOS};

/// Worker-count cap for parallel assembly.
const THREADS_ENV: &str = "SDMEFEM_THREADS";

#[derive(Parser)]
#[command(name = "sdmefem", version, about = "High-order SDME finite elements for nonlinear elastodynamics")]
struct Cli {
    /// Directory receiving CSV and VTK outputs.
    #[arg(long, global = true, default_value = "out")]
    outdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration file.
    Run { config: PathBuf },
    /// Run a built-in scenario.
    Scenario {
        /// Scenario name; `list` prints the registry.
        name: String,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        basis: Option<BasisTag>,
    },
    /// Compare bases over polynomial orders on a template problem.
    Compare {
        /// Configuration file or built-in scenario name.
        template: String,
        /// Comma-separated basis kinds.
        #[arg(long, value_delimiter = ',', default_value = "ST,SDME_M,SDME_H")]
        bases: Vec<BasisTag>,
        /// Orders as `a..b` (inclusive) or a comma-separated list.
        #[arg(long, value_parser = parse_orders)]
        orders: Orders,
    },
    /// Condition numbers and sparsity of the 1D matrices of every basis.
    ReportConditioning {
        #[arg(long, value_parser = parse_orders, default_value = "2..12")]
        orders: Orders,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, value_delimiter = ',', default_value = "LAGRANGE,ST,SDME_M,SDME_K,SDME_H")]
        bases: Vec<BasisTag>,
    },
}

#[derive(Debug, Clone)]
struct Orders(Vec<usize>);

fn parse_orders(s: &str) -> std::result::Result<Orders, String> {
    let bad = || format!("expected `a..b` or `a,b,c`, got '{s}'");
    let v: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>()?
    };
    if v.is_empty() {
        return Err(bad());
    }
    Ok(Orders(v))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Reads a configuration, resolving a relative mesh path against the
/// configuration's directory.
fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("invalid configuration {}", path.display()))?;
    if let MeshSource::File(p) = &mut cfg.mesh {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

fn report(b: &ReportBundle) {
    let s = &b.summary;
    println!(
        "{}: {} P={} {} dofs={} boundary={} steps={} mean_iterations={:.2} mean_solve_seconds={:.3e} newton={}",
        s.name,
        s.basis,
        s.order,
        s.scheme.label(),
        s.num_free,
        s.num_boundary,
        s.steps,
        s.mean_iterations,
        s.mean_solve_seconds,
        s.newton_iterations
    );
    if let Some(e) = s.errors {
        println!("  L2 error: x {:.5e} y {:.5e} z {:.5e}", e[0], e[1], e[2]);
    }
    if let (Some(p), Some(r)) = (s.max_penetration, s.rebound) {
        println!("  max penetration {p:.5e}, rebound {r}");
    }
    if let Some(d) = s.energy_drift {
        println!("  energy drift {d:.5e}");
    }
    for f in &b.files {
        println!("  wrote {}", f.display());
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            report(&run_scenario(&cfg, Some(&cli.outdir))?);
        }
        Command::Scenario { name, order, basis } => {
            if name == "list" {
                for s in SCENARIOS {
                    println!("{s}");
                }
                return Ok(());
            }
            let cfg = scenario_config(&name, order, basis)?;
            report(&run_scenario(&cfg, Some(&cli.outdir))?);
        }
        Command::Compare {
            template,
            bases,
            orders,
        } => {
            let cfg = if scenario_text(&template).is_some() {
                scenario_config(&template, None, None)?
            } else {
                load_config(Path::new(&template))?
            };
            let rows = benchmark_compare(&cfg, &bases, &orders.0);
            let csv = compare_csv(&rows);
            print!("{csv}");
            write(&cli.outdir, &format!("{}_compare.csv", cfg.output.name), &csv)?;
            if rows.iter().all(|r| r.outcome.is_err()) {
                bail!("every comparison run failed");
            }
        }
        Command::ReportConditioning {
            orders,
            k,
            lambda,
            bases,
        } => {
            let (lo, hi) = (orders.0[0], *orders.0.last().unwrap_or(&orders.0[0]));
            if orders.0.windows(2).any(|w| w[1] != w[0] + 1) {
                bail!("conditioning reports need a contiguous order range");
            }
            let cond = conditioning_report(&bases, lo..=hi, k, lambda)?;
            let sparse = sparsity_report(&bases, lo..=hi, k, lambda)?;
            write(&cli.outdir, "conditioning.csv", &conditioning_csv(&cond))?;
            write(&cli.outdir, "sparsity.csv", &sparsity_csv(&sparse))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_ranges() {
        assert_eq!(parse_orders("2..5").unwrap().0, vec![2, 3, 4, 5]);
        assert_eq!(parse_orders("2..=3").unwrap().0, vec![2, 3]);
        assert_eq!(parse_orders("4, 6,8").unwrap().0, vec![4, 6, 8]);
        assert!(parse_orders("5..2").is_err());
        assert!(parse_orders("x").is_err());
    }

    #[test]
    fn cli_shape_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["sdmefem", "compare", "static-cube-mms", "--bases", "ST,SDME-M", "--orders", "4,6"]).unwrap();
        match c.command {
            Command::Compare { bases, orders, .. } => {
                assert_eq!(bases, vec![BasisTag::ModalJacobi, BasisTag::SdmeM]);
                assert_eq!(orders.0, vec![4, 6]);
            }
            _ => panic!("wrong subcommand"),
        }
    }
}
