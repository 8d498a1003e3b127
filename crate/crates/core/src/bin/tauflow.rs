fn main() {
    std::process::exit(tauflow::cli::cli_main(std::env::args_os()));
}
