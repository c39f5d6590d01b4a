fn main() {
    std::process::exit(dashfusion::cli::run(std::env::args_os()));
}
