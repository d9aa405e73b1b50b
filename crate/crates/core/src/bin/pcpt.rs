fn main() {
    std::process::exit(pcpt::harness::cli::run(std::env::args_os()));
}
