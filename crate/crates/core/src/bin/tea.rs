fn main() {
    std::process::exit(tea_moelora::cli::main_with(std::env::args_os()));
}
