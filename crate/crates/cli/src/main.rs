use std::process::ExitCode;

use florg_cli::{run_cli, SEED_ENV};

fn main() -> ExitCode {
    let env_seed = std::env::var(SEED_ENV).ok();
    let code = run_cli(
        std::env::args_os(),
        env_seed.as_deref(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    ExitCode::from(code)
}
