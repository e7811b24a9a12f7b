fn main() {
    std::process::exit(chils_cli::run(std::env::args_os()));
}
