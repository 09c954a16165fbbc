fn main() {
    std::process::exit(ctxlink_core::cli::run(std::env::args_os()));
}
