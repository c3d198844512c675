fn main() {
    std::process::exit(belief3d::cli::run(std::env::args_os()));
}
