fn main() {
    std::process::exit(treg_core::cli::run_from(std::env::args_os()));
}
