fn main() {
    std::process::exit(pcr_lab::cli::run_with(std::env::args_os()));
}
