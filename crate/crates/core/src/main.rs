fn main() {
    std::process::exit(proto_ood::cli::main_with_args(std::env::args_os()));
}
