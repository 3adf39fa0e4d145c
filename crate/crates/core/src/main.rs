fn main() {
    std::process::exit(scdma::cli::main_with_args(std::env::args_os()));
}
