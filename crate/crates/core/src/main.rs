fn main() {
    std::process::exit(marl_evo::cli::run_cli(std::env::args_os()));
}
