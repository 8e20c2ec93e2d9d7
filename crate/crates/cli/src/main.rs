fn main() {
    std::process::exit(rom_gnn::cli::main_with_args(std::env::args_os()));
}
