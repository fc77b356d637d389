//! Command-line front end for metakit: declarative configs in, JSON result
//! bundles and SVG plots out.

pub mod bundle;
pub mod config;
pub mod exit;
pub mod rcode;
pub mod run;
pub mod tables;

use std::path::Path;

use bundle::Bundle;
use config::LoadedConfig;
use exit::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Es,
    Fit,
    Plot,
    Pubbias,
    EmitRCode,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Es => "es",
            Command::Fit => "fit",
            Command::Plot => "plot",
            Command::Pubbias => "pubbias",
            Command::EmitRCode => "emit-r-code",
        }
    }
}

/// Run one command. Returns the exit code; messages go to stdout/stderr.
pub fn execute(cmd: Command, config: &Path, out: &Path) -> i32 {
    let lc = match config::load(config) {
        Ok(lc) => lc,
        Err(e) => {
            eprintln!("metakit: {e}");
            return e.code();
        }
    };
    match dispatch(cmd, &lc, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("metakit: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command, lc: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    match cmd {
        Command::Es => {
            let d = run::load_data(lc)?;
            let es = run::effect_sizes(&lc.config, &d);
            let es = match es {
                Ok(es) => es,
                Err(e) => return Err(e),
            };
            for (name, r) in &es.reports {
                println!(
                    "{name}: {} of {} effect sizes computed",
                    r.computed, r.attempted
                );
                for (row, why) in &r.failed {
                    println!("  row {row}: {why}");
                }
                if !r.corrected.is_empty() {
                    println!(
                        "  continuity correction applied to {} rows",
                        r.corrected.len()
                    );
                }
            }
            let target = out.join("effect_sizes.csv");
            es.data.write_csv(&target)?;
            println!("wrote {}", target.display());
            Ok(())
        }
        Command::EmitRCode => {
            let code = rcode::emit_r_code(&lc.config);
            let target = out.join("analysis.R");
            std::fs::write(&target, &code)
                .map_err(|e| CliError::Io(format!("{}: {e}", target.display())))?;
            print!("{code}");
            Ok(())
        }
        Command::Fit | Command::Plot | Command::Pubbias => {
            let data = lc.resolve(&lc.config.data);
            let mut bundle = Bundle::new(cmd.name(), &lc.bytes, Some(&data));
            let res = match cmd {
                Command::Fit => run::run_fit(lc, out, &mut bundle, true, true),
                Command::Plot => run::run_fit(lc, out, &mut bundle, false, true),
                _ => run::run_pubbias(lc, &mut bundle),
            };
            if let Err(e) = &res {
                bundle.set_error(e);
            }
            bundle.write(out)?;
            res
        }
    }
}
