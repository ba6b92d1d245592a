fn main() {
    let code = photocue_cli::main_with(std::env::args().skip(1).collect());
    std::process::exit(code);
}
