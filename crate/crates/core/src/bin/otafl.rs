use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_complex::Complex64;

use otafl::iht::{iht_reconstruct, IhtConfig};
use otafl::linmap::generate_matrix;
use otafl::numcore::{cnorm_sq, rng_stream};
use otafl::pipelines::{transmit_aggregate, ChannelConfig, DesignKind, DesignSpec, RoundSeed};
use otafl::runner::{emit_plotdata, load_config, run_experiment, write_table, PlotMode};

/// Over-the-air federated learning simulator.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run { config: PathBuf },
    /// Reduce run CSVs (or histogram dumps) to a mean/min/max table.
    Plotdata {
        /// vs_round, vs_channel_uses or histogram
        mode: PlotMode,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Quick sanity checks of the channel and reconstruction code.
    Selftest,
}

fn selftest() -> Vec<(&'static str, bool)> {
    let mut g = rng_stream(0, "selftest");
    let updates: Vec<Vec<f64>> = (0..10).map(|_| (0..2000).map(|_| g.standard_normal()).collect()).collect();
    let w = vec![0.1; 10];
    let noiseless = ChannelConfig {
        noise_var: 0.0,
        gain_threshold: 0.0,
        ..ChannelConfig::default()
    };
    let rs = RoundSeed { seed: 0, round: 1 };
    let case1 = transmit_aggregate(
        &DesignSpec::new(DesignKind::Case1Uncompressed, 0, 0),
        &noiseless,
        &updates,
        &w,
        None,
        rs,
    )
    .ok()
    .and_then(|t| t.agg_nmse)
    .is_some_and(|e| e < 1e-20);

    let a = generate_matrix(&mut rng_stream(0, "matrix"), 60, 128, 1.01).ok();
    let power = a.as_ref().is_some_and(|a| {
        let tx = transmit_aggregate(
            &DesignSpec::new(DesignKind::Case4CompressedOnly, 8, 60),
            &ChannelConfig::default(),
            &updates.iter().map(|u| u[..256].to_vec()).collect::<Vec<_>>(),
            &w,
            Some(a),
            rs,
        );
        tx.ok()
            .and_then(|t| t.report)
            .is_some_and(|r| r.max_energy() <= r.budget * (1.0 + 1e-9))
    });

    let recovery = a.as_ref().is_some_and(|a| {
        let mut x = vec![Complex64::new(0.0, 0.0); 128];
        for (i, k) in [3usize, 40, 77].iter().enumerate() {
            x[*k] = Complex64::from_polar(1.0, i as f64);
        }
        let y = a.compress(&x).unwrap();
        let cfg = IhtConfig {
            epsilon: 1e-28,
            max_iters: 20_000,
            scale_epsilon: false,
            ..IhtConfig::new(3)
        };
        iht_reconstruct(a, &y, &cfg).is_ok_and(|r| {
            let err: f64 = r.estimate.dense.iter().zip(&x).map(|(p, q)| (p - q).norm_sqr()).sum();
            err / cnorm_sq(&x) < 1e-10
        })
    });
    vec![
        ("noiseless case-1 aggregation is exact", case1),
        ("per-device energy within budget", power),
        ("IHT recovers a 3-sparse vector", recovery),
    ]
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => load_config(&config).and_then(|cfg| run_experiment(&cfg)).map(|runs| {
            for r in runs {
                let last = r.rows.last().map_or(f64::NAN, |m| m.test_accuracy);
                println!("seed {}: {} rounds, final accuracy {last:.4} -> {}", r.seed, r.rows.len(), r.csv.display());
            }
        }),
        Command::Plotdata { mode, inputs, output } => {
            emit_plotdata(&inputs, mode).and_then(|(text, _)| write_table(&text, output.as_deref()))
        }
        Command::Selftest => {
            let checks = selftest();
            for (name, ok) in &checks {
                println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
            }
            if checks.iter().all(|c| c.1) {
                Ok(())
            } else {
                return ExitCode::FAILURE;
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
