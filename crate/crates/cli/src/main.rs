fn main() {
    std::process::exit(vtrans_cli::run(std::env::args_os()));
}
