fn main() {
    std::process::exit(mtgrr::cli::run_cli(std::env::args_os()));
}
