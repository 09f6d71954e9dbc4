fn main() {
    std::process::exit(ehybrid::cli::cli_main(std::env::args_os()));
}
