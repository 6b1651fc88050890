fn main() {
    std::process::exit(pbrl_harness::cli::main_with(std::env::args_os()));
}
