//! Test peer for the external denoiser protocol.
//!
//! ```text
//! nrlg-peer [--mode analytic|zero|wrong-shape|bad-version|reject|garbage]
//!           [--mean M --var V | --mean-file F --var-file F] [--status S]
//! ```

use std::process::ExitCode;

use nrlg::denoiser::{run_peer, PeerMode};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = match PeerMode::from_args(&args) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("nrlg-peer: {e}");
            return ExitCode::from(2);
        }
    };
    match run_peer(mode, &mut std::io::stdin().lock(), &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nrlg-peer: {e}");
            ExitCode::from(1)
        }
    }
}
