fn main() {
    std::process::exit(soliton_forge::cli::run(std::env::args_os()));
}
