fn main() {
    std::process::exit(bimodal_cli::run(std::env::args_os()));
}
