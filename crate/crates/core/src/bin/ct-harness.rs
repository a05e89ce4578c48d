fn main() {
    std::process::exit(ct_harness::cli::main_with_args(std::env::args_os()));
}
