fn main() {
    std::process::exit(ffdi::harness::main_with_args(std::env::args_os()));
}
