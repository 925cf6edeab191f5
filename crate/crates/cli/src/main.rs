use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use markgate_core::bulletin::Bulletin;
use markgate_core::gateway::{Gateway, GatewayConfig};
use markgate_core::model::LoadedModel;
use markgate_core::simattack::{run_scenario, AttackScenario};
use markgate_core::stats;
use markgate_core::triggerstore::WatermarkBundle;
use markgate_core::verify;

use markgate_cli::suspect::Suspect;

#[derive(Parser)]
#[command(
    name = "markgate",
    version,
    about = "Watermarking gateway and ownership toolkit for prediction APIs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the watermarking gateway in front of a model.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Judge: verify a registered watermark against a suspect model.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        board: PathBuf,
        /// The victim model file.
        #[arg(long)]
        model: PathBuf,
        /// Suspect prediction API URL or model file path.
        #[arg(long)]
        suspect: String,
        /// Tolerated error rate, e.g. 0.5 (parsed exactly).
        #[arg(long)]
        e: String,
        /// Override the registered-watermark count used in the confidence
        /// correction.
        #[arg(long)]
        n_registered: Option<u64>,
        #[arg(long)]
        suspect_api_key: Option<String>,
        /// Also write the report JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Judge: adjudicate a contested verdict with the alleged original model.
    Contest {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        board: PathBuf,
        /// The victim model file (a passing verification is a precondition).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        suspect: String,
        /// The contester's model file.
        #[arg(long)]
        contester_model: PathBuf,
        #[arg(long)]
        e: String,
        #[arg(long)]
        suspect_api_key: Option<String>,
    },
    /// Watermark sizing math (exact arithmetic).
    Stats {
        #[command(subcommand)]
        cmd: StatsCmd,
    },
    /// Replay a seeded extraction scenario against an in-process gateway.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for the report, CSV and gateway storage.
        #[arg(long, default_value = "simulate-out")]
        out: PathBuf,
    },
    /// Generate a fresh 32-byte gateway key (hex).
    Keygen,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// P(L < e) for an unrelated model: the trivial verification probability.
    TrivialProb {
        #[arg(long)]
        m: u64,
        #[arg(long)]
        e: String,
        #[arg(long)]
        size: u64,
        /// Also sweep sizes 1..=N and write CSV rows (size, log10 prob).
        #[arg(long)]
        sweep_to: Option<u64>,
        #[arg(long, requires = "sweep_to")]
        csv: Option<PathBuf>,
    },
    /// Smallest watermark size meeting a target probability.
    MinSize {
        #[arg(long)]
        m: u64,
        #[arg(long)]
        e: String,
        /// Target bound, e.g. "2^-64/10^6" or "1e-20".
        #[arg(long)]
        target: String,
    },
    /// Watermark ratio r_w = |T| * colluders / N.
    Ratio {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        size: u64,
        #[arg(long, default_value_t = 1)]
        colluders: u64,
        /// Baseline accuracy; reports expected accuracy behind the gateway.
        #[arg(long)]
        acc: Option<String>,
    },
    /// Union-bound correction for testing many registered watermarks.
    Confidence {
        /// Single-watermark trivial probability, e.g. "2^-84" or "5.4e-26".
        #[arg(long)]
        p: String,
        #[arg(long)]
        clients: u64,
    },
}

/// Scientific-notation rendering from a log10 value.
fn sci(log10: f64) -> String {
    if log10 == f64::NEG_INFINITY {
        return "0".into();
    }
    let exp = log10.floor();
    let mant = 10f64.powf(log10 - exp);
    format!("{mant:.4}e{exp:+03}")
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn cmd_serve(config: PathBuf) -> anyhow::Result<()> {
    let cfg = GatewayConfig::from_file(&config).context("loading config")?;
    let gateway = Arc::new(Gateway::from_config(&cfg).context("building gateway")?);
    tracing::info!(
        model = %gateway.model().spec().model_id,
        m = gateway.model().num_classes(),
        r_w = %gateway.keys().r_w,
        k = gateway.k(),
        "gateway ready"
    );
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        tracing::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, markgate_cli::http::router(gateway))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await?;
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    bundle: PathBuf,
    board: PathBuf,
    model: PathBuf,
    suspect: String,
    e: String,
    n_registered: Option<u64>,
    suspect_api_key: Option<String>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let bundle = WatermarkBundle::from_file(&bundle).context("loading bundle")?;
    let board = Bulletin::open(&board).context("opening bulletin")?;
    let victim = LoadedModel::from_file(&model).context("loading victim model")?;
    let suspect = Suspect::resolve(&suspect, suspect_api_key)?;
    let e = stats::parse_decimal(&e).context("parsing e")?;
    let report = verify::judge_verify(
        &board,
        &bundle,
        &victim,
        suspect.as_class_oracle(),
        &e,
        n_registered,
    )?;
    let rendered = serde_json::to_value(&report)?;
    print_json(&rendered);
    if let Some(path) = out {
        std::fs::write(&path, serde_json::to_vec_pretty(&rendered)?)?;
    }
    Ok(())
}

fn cmd_contest(
    bundle: PathBuf,
    board: PathBuf,
    model: PathBuf,
    suspect: String,
    contester_model: PathBuf,
    e: String,
    suspect_api_key: Option<String>,
) -> anyhow::Result<()> {
    let bundle = WatermarkBundle::from_file(&bundle).context("loading bundle")?;
    let board = Bulletin::open(&board).context("opening bulletin")?;
    let victim = LoadedModel::from_file(&model).context("loading victim model")?;
    let provided = LoadedModel::from_file(&contester_model).context("loading contester model")?;
    let suspect = Suspect::resolve(&suspect, suspect_api_key)?;
    let e = stats::parse_decimal(&e).context("parsing e")?;

    // a contest only makes sense against a standing verdict
    let prior = verify::judge_verify(
        &board,
        &bundle,
        &victim,
        suspect.as_class_oracle(),
        &e,
        None,
    )?;
    if !prior.passed {
        bail!(
            "verification does not pass against this suspect (failed step {:?}); nothing to contest",
            prior.failed_step
        );
    }
    let outcome = verify::contest(&board, &bundle, suspect.as_vector_oracle(), &provided)?;
    print_json(&serde_json::to_value(&outcome)?);
    Ok(())
}

fn cmd_stats(cmd: StatsCmd) -> anyhow::Result<()> {
    match cmd {
        StatsCmd::TrivialProb {
            m,
            e,
            size,
            sweep_to,
            csv,
        } => {
            let e = stats::parse_decimal(&e).context("parsing e")?;
            let p = stats::trivial_prob(m, &e, size)?;
            print_json(&json!({
                "m": m,
                "size": size,
                "tolerated_mismatches": stats::mismatch_cutoff(&e, size),
                "prob_log10": p.log10,
                "prob_sci": sci(p.log10),
            }));
            if let Some(t_max) = sweep_to {
                let rows = stats::sweep(m, &e, t_max)?;
                let mut csv_text = String::from("size,log10_prob\n");
                for (t, l) in rows {
                    csv_text.push_str(&format!("{t},{l:.6}\n"));
                }
                match csv {
                    Some(path) => std::fs::write(&path, csv_text)?,
                    None => print!("{csv_text}"),
                }
            }
        }
        StatsCmd::MinSize { m, e, target } => {
            let e = stats::parse_decimal(&e).context("parsing e")?;
            let target = stats::parse_prob_expr(&target).context("parsing target")?;
            let size = stats::min_watermark_size(m, &e, &target)?;
            let p = stats::trivial_prob(m, &e, size)?;
            print_json(&json!({
                "m": m,
                "target_log10": stats::log10_rational(&target),
                "min_size": size,
                "prob_at_min_log10": p.log10,
            }));
        }
        StatsCmd::Ratio {
            n,
            size,
            colluders,
            acc,
        } => {
            let r = stats::required_ratio(n, size, colluders)?;
            let mut out = json!({
                "n_queries": n,
                "size": size,
                "colluders": colluders,
                "r_w": format!("{}/{}", r.exact.numer(), r.exact.denom()),
                "r_w_percent": r.percent,
            });
            if let Some(acc) = acc {
                let acc = stats::parse_decimal(&acc).context("parsing acc")?;
                let new_acc = stats::utility_loss(&r.exact, &acc)?;
                out["expected_acc_percent"] = json!(stats::percent_string(&new_acc, 1));
            }
            print_json(&out);
        }
        StatsCmd::Confidence { p, clients } => {
            let p = stats::parse_prob_expr(&p).context("parsing p")?;
            let c = stats::effective_confidence(&p, clients)?;
            let bound_log10 = stats::log10_rational(&c.trivial_bound);
            print_json(&json!({
                "clients": clients,
                "trivial_bound_log10": bound_log10,
                "trivial_bound_sci": sci(bound_log10),
                "clamped": c.clamped(),
            }));
        }
    }
    Ok(())
}

fn cmd_simulate(scenario: PathBuf, out: PathBuf) -> anyhow::Result<()> {
    let scenario = AttackScenario::from_file(&scenario).context("loading scenario")?;
    let workdir = out.join("work");
    std::fs::create_dir_all(&workdir)?;
    let report = run_scenario(&scenario, &workdir)?;
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    for c in &report.clients {
        println!(
            "{}  queries={} triggers={} acc_wm={:.3} verified={}{}",
            c.client_id,
            c.queries,
            c.bundle_size,
            c.acc_wm,
            c.verification_passed,
            if c.colluder { "" } else { "  (bystander)" }
        );
    }
    match report.expectation_met {
        Some(true) => println!("expectation met: {:?}", report.expected.unwrap()),
        Some(false) => {
            println!("EXPECTATION NOT MET: {:?}", report.expected.unwrap());
            std::process::exit(1);
        }
        None => {}
    }
    Ok(())
}

fn cmd_keygen() -> anyhow::Result<()> {
    use rand::RngCore;
    let mut key = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut key);
    println!("{}", hex::encode(key));
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "markgate=info,markgate_core=info".into()),
        )
        .init();

    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Serve { config } => cmd_serve(config),
        Command::Verify {
            bundle,
            board,
            model,
            suspect,
            e,
            n_registered,
            suspect_api_key,
            out,
        } => cmd_verify(
            bundle,
            board,
            model,
            suspect,
            e,
            n_registered,
            suspect_api_key,
            out,
        ),
        Command::Contest {
            bundle,
            board,
            model,
            suspect,
            contester_model,
            e,
            suspect_api_key,
        } => cmd_contest(
            bundle,
            board,
            model,
            suspect,
            contester_model,
            e,
            suspect_api_key,
        ),
        Command::Stats { cmd } => cmd_stats(cmd),
        Command::Simulate { scenario, out } => cmd_simulate(scenario, out),
        Command::Keygen => cmd_keygen(),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
