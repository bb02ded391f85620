fn main() {
    std::process::exit(seqrl::cli::main_with_args(std::env::args_os()));
}
