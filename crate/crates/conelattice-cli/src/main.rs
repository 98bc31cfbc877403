fn main() {
    std::process::exit(conelattice_cli::run(std::env::args_os()));
}
