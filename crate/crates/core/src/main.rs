fn main() {
    std::process::exit(zrp_simplex::cli::dispatch(std::env::args_os()));
}
