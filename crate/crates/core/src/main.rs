fn main() {
    let code = sesim::cli::run(std::env::args_os());
    std::process::exit(code);
}
