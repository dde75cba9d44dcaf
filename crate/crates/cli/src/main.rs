fn main() {
    std::process::exit(mugs_cli::cli_main(std::env::args_os()));
}
