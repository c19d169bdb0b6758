fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(awl_core::cli::run(&args));
}
