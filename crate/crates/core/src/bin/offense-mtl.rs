fn main() {
    std::process::exit(offense_mtl::cli::run(std::env::args_os()));
}
