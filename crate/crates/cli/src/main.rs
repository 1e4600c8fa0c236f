fn main() {
    std::process::exit(gkrls_cli::run(std::env::args_os()));
}
