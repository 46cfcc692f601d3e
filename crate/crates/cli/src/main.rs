fn main() {
    std::process::exit(spmm_cli::run(std::env::args_os()));
}
