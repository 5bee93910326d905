fn main() {
    std::process::exit(prefill_engine::cli::main_with_args(std::env::args_os()));
}
