fn main() {
    std::process::exit(rnco::cli::cli_main(std::env::args_os()));
}
