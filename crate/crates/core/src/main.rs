fn main() {
    std::process::exit(wiselab::cli::run_command(std::env::args_os()));
}
