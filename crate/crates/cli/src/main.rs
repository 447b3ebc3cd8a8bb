fn main() {
    std::process::exit(hardneg_cli::run(std::env::args_os()));
}
