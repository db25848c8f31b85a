fn main() {
    let code = uol::cli::run_cli(std::env::args_os());
    std::process::exit(code);
}
