fn main() {
    std::process::exit(shiftedit_cli::run(std::env::args_os()));
}
