fn main() {
    let code = multigap::cli::run(std::env::args_os());
    std::process::exit(code);
}
