fn main() {
    std::process::exit(gtdiff_cli::run_cli(std::env::args_os()));
}
