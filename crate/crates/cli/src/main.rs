fn main() {
    std::process::exit(aerosol_cli::main_with_args(std::env::args_os()));
}
