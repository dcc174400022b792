fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(histonet::cli::run_from(std::env::args_os()) as u8)
}
