fn main() {
    std::process::exit(svdkl_cli::run_command(std::env::args_os()));
}
