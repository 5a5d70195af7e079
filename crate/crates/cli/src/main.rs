// SPDX-License-Identifier: Apache-2.0

//! `cfs`: operator and evaluation front end for CapsuleFS.

mod commands;
mod shell;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cfs", version, about = "CapsuleFS tools")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OpChoice {
    Read,
    Write,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create a deployment directory: keys, configs, capsules, root.
    Init {
        dir: PathBuf,
        #[arg(long, default_value_t = 512)]
        block_size: usize,
        /// Disable signatures and encryption (benchmark baseline).
        #[arg(long)]
        no_crypto: bool,
        #[arg(long)]
        force: bool,
        /// Root member as NAME:UID; repeatable. Default `client:1000`.
        #[arg(long = "user")]
        users: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:7400")]
        capsule_listen: String,
        #[arg(long, default_value = "127.0.0.1:7401")]
        middleware_listen: String,
    },
    /// Host the capsules named in a capsule server config.
    ServeCapsule {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run the write middleware.
    Middleware {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Mount and serve a command shell on stdin.
    Mount {
        #[arg(long)]
        config: PathBuf,
        /// Read-only view as of this timestamp (microseconds).
        #[arg(long)]
        snapshot: Option<u64>,
        /// Run a workload script against the mount instead of the shell.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Background flush period; 0 flushes only on request and exit.
        #[arg(long, default_value_t = 0)]
        flush_interval_ms: u64,
        /// Background refresh period; 0 disables it.
        #[arg(long, default_value_t = 0)]
        sync_interval_ms: u64,
    },
    /// Run attack scenarios against a fresh stack.
    AttackSim {
        /// Scenario name or `all`.
        kind: String,
        /// Run the roles over TCP instead of in-process.
        #[arg(long)]
        tcp: bool,
        /// Also check that weakening each defence flips its verdict.
        #[arg(long)]
        mutation: bool,
    },
    /// Per-block latency benchmark.
    Bench {
        #[arg(long, value_enum, default_value_t = OpChoice::Both)]
        op: OpChoice,
        #[arg(long, value_enum, default_value_t = Toggle::Both)]
        crypto: Toggle,
        /// Add cached repeat-read rows.
        #[arg(long)]
        cached: bool,
        /// Comma-separated sizes, e.g. `64k,128k,1m`.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 512)]
        block_size: usize,
        /// Write every sample to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a workload script.
    Workload {
        script: PathBuf,
        /// Run against a deployment; users map to `mount-<name>.toml`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tcp: bool,
    },
    /// List or read the tree as of a timestamp.
    Snapshot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ts: u64,
        path: Option<String>,
    },
    /// Inspect client journals.
    Journal {
        #[command(subcommand)]
        action: JournalAction,
    },
    /// Blocklist a client key (signed with the admin key).
    Revoke {
        /// Middleware config holding the admin key and address.
        #[arg(long)]
        config: PathBuf,
        /// Key file of the key to revoke.
        #[arg(long)]
        key: PathBuf,
        /// Also remove the key from every ACL.
        #[arg(long)]
        scrub: bool,
    },
    /// Seeded codec corpus: write one, or check one from another run.
    Corpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum JournalAction {
    Inspect { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::json!({ "error": e }));
            } else {
                eprintln!("cfs: {e}");
            }
            ExitCode::from(2)
        }
    }
}
