fn main() {
    std::process::exit(mvmrf::cli::cli_main(std::env::args()));
}
