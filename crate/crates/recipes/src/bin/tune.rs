fn main() {
    std::process::exit(minitune_recipes::cli::cli_main(std::env::args_os()));
}
