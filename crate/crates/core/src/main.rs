use std::process::ExitCode;

fn main() -> ExitCode {
    calib::cli::dispatch(std::env::args_os())
}
