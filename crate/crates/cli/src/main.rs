fn main() {
    std::process::exit(stic_cli::run(std::env::args_os()));
}
