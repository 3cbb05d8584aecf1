fn main() {
    std::process::exit(qduffing::runner::cli_dispatch(std::env::args_os()));
}
