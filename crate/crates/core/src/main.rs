fn main() {
    std::process::exit(clustermf::cli::main_with(std::env::args_os()));
}
